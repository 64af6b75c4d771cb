//! Cross-modal collaborative navigation at desk scale.
//!
//! Two heterogeneous agents (one hearing, one seeing, or any preset mix)
//! search procedurally generated 2D grid worlds for sounding targets.
//! Audio is synthesized binaurally and turned into spectrograms; an
//! auxiliary belief net predicts where the sound comes from; a
//! centralized critic trains decentralized policies with clipped PPO
//! and generalized advantage estimation. Everything numerical runs on a
//! small hand-rolled reverse-mode tape over f64 tensors.

pub mod belief;
pub mod config;
pub mod env;
pub mod error;
pub mod nn;
pub mod par;
pub mod policy;
pub mod scene;
pub mod sensors;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

//! Per-agent observation rendering: restricted depth images from 2D
//! raycasting, binaural audio synthesized from active targets, and
//! magnitude spectrograms. Everything here is pure given (scene, pose,
//! sources, seed).

pub mod audio;
pub mod depth;
pub mod image;
pub mod stft;

pub use audio::{
    distance_gain, ear_gains, render_binaural, synthesize_source, ActiveSource, AudioConfig,
    Binaural,
};
pub use depth::{render_depth, DepthConfig, DepthImage};
pub use image::{resize_bilinear, save_pgm};
pub use stft::{stft_spectrogram, Spectrogram, StftParams, WindowKind};

//! Centralized-critic PPO.
//!
//! The trainer collects on-policy rollouts from one or more parallel
//! environments, computes generalized advantage estimates over the
//! streams, and applies clipped-surrogate updates where a single tape
//! carries every agent's objective, the shared critic's value loss, and
//! the auxiliary belief losses. Execution stays decentralized: only the
//! critic ever sees privileged state, and it is dropped entirely at
//! evaluation time.

mod gae;
mod losses;
mod pomdp;
mod rollout;
mod run;
mod update;

pub use gae::{compute_gae, normalize_advantages};
pub use losses::{
    combined_loss, combined_loss_tape, entropy_rows, policy_objective_scalar,
    policy_objective_tape, value_loss_scalar, value_loss_tape,
};
pub use pomdp::{
    coin_flip_pomdp, filter_belief, fully_observable_pomdp, state_values, unbiasedness_report,
    HistoryReport, ReactivePolicy, TabularDecPomdp, UnbiasednessReport,
};
pub use rollout::{
    mask_belief_feature, AgentRollout, Collector, FinishedEpisode, RolloutBatch, Segment,
};
pub use update::{joint_update, UpdateStats};

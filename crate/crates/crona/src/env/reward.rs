//! Team reward formulas.
//!
//! Three variants share one structure: per-step slack, geodesic
//! distance progress toward the nearest unfound target, goal rewards
//! on discovery, and a penalty per stop call. Single-target episodes
//! use per-agent slack and a flat success bonus; multi-target episodes
//! use team slack and progress-scaled goal rewards; maze episodes
//! rescale everything for the long horizon.

use crate::scene::{geodesic::DistanceField, Cell, SceneKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub single_target: bool,
    /// Per agent when single_target, team-level otherwise.
    pub slack: f64,
    pub dist_scale: f64,
    /// Flat success bonus (single) or base of the progress-scaled goal
    /// term (multi/maze).
    pub goal_scale: f64,
    /// Extra multiplier on the goal term (or on the distance term when
    /// the alternative attachment flag is set). 1.0 outside mazes.
    pub progressive: f64,
    pub stop_penalty: f64,
}

impl RewardSpec {
    pub fn for_episode(kind: SceneKind, n_targets: usize) -> RewardSpec {
        if kind == SceneKind::Maze {
            RewardSpec {
                single_target: false,
                slack: -0.002,
                dist_scale: 2.0,
                goal_scale: 20.0 * 3.0,
                progressive: 1.5,
                stop_penalty: 0.2,
            }
        } else if n_targets == 1 {
            RewardSpec {
                single_target: true,
                slack: -0.02,
                dist_scale: 1.0,
                goal_scale: 20.0,
                progressive: 1.0,
                stop_penalty: 0.0,
            }
        } else {
            RewardSpec {
                single_target: false,
                slack: -0.02,
                dist_scale: 1.0,
                goal_scale: 20.0,
                progressive: 1.0,
                stop_penalty: 0.2,
            }
        }
    }
}

/// Everything a step reward depends on, gathered by the environment
/// (or recomputed by the accounting verifier).
pub struct StepFacts<'a> {
    pub fields: &'a [DistanceField],
    /// Target indices unfound at the start of the step; distance
    /// progress is measured against this set at both endpoints.
    pub unfound_before: &'a [usize],
    pub prev_cells: &'a [Cell],
    pub new_cells: &'a [Cell],
    pub stops: &'a [bool],
    /// Per agent: stopped inside the success radius of a target that
    /// was unfound at step start (single-target credit).
    pub success_stops: &'a [bool],
    /// Discoveries this step in claim order.
    pub newly_found: &'a [usize],
    pub n_total: usize,
    pub progressive_on_distance: bool,
}

impl RewardSpec {
    pub fn team_reward(&self, f: &StepFacts) -> f64 {
        let n_agents = f.prev_cells.len();
        let dist_scale = if f.progressive_on_distance {
            self.dist_scale * self.progressive
        } else {
            self.dist_scale
        };
        let goal_mult = if f.progressive_on_distance {
            self.goal_scale
        } else {
            self.goal_scale * self.progressive
        };

        let mut r = 0.0;
        for i in 0..n_agents {
            let d_prev = nearest(f.fields, f.unfound_before, f.prev_cells[i]);
            let d_new = nearest(f.fields, f.unfound_before, f.new_cells[i]);
            if let (Some(a), Some(b)) = (d_prev, d_new) {
                r += dist_scale * (a - b);
            }
        }
        if self.single_target {
            r += self.slack * n_agents as f64;
            let successes = f.success_stops.iter().filter(|s| **s).count();
            r += self.goal_scale * successes as f64;
        } else {
            r += self.slack;
            let n_stop = f.stops.iter().filter(|s| **s).count();
            r -= self.stop_penalty * n_stop as f64;
            let already = f.n_total - f.unfound_before.len();
            for k in 0..f.newly_found.len() {
                let progress = (already + k + 1) as f64 / f.n_total as f64;
                r += progress * goal_mult;
            }
        }
        r
    }
}

fn nearest(fields: &[DistanceField], unfound: &[usize], cell: Cell) -> Option<f64> {
    unfound
        .iter()
        .filter_map(|&j| fields[j].get(cell))
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

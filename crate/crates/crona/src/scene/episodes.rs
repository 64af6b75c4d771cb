//! Episode datasets: agent starts and active targets under per-kind
//! distance constraints, split 3:1 into train and validation.

use super::geodesic::DistanceField;
use super::{Cell, Scene, SceneKind};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStart {
    pub cell: Cell,
    /// Cardinal heading index, 0..4.
    pub heading: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub id: u32,
    pub split: Split,
    pub starts: Vec<AgentStart>,
    /// Indices into `Scene::targets` active this episode.
    pub targets: Vec<usize>,
    /// Seed for per-episode audio source phase.
    pub audio_seed: u64,
}

/// Geodesic distance constraints in meters. `None` bounds are open.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeConstraints {
    pub start_goal_min: f64,
    pub start_goal_max: Option<f64>,
    pub inter_agent_min: f64,
}

impl EpisodeConstraints {
    pub fn for_kind(kind: SceneKind) -> EpisodeConstraints {
        let (start_goal_min, start_goal_max) = match kind {
            SceneKind::Studio => (2.0, None),
            SceneKind::Corridor => (2.0, Some(5.0)),
            SceneKind::Apartment => (4.0, None),
            SceneKind::Ranch => (4.0, None),
            SceneKind::Maze => (3.0, Some(10.0)),
        };
        EpisodeConstraints { start_goal_min, start_goal_max, inter_agent_min: 1.5 }
    }

    fn start_goal_ok(&self, d: Option<f64>) -> bool {
        match d {
            None => false,
            Some(d) => d >= self.start_goal_min && self.start_goal_max.map_or(true, |m| d <= m),
        }
    }
}

pub fn generate_episodes(
    scene: &Scene,
    count: usize,
    n_agents: usize,
    seed: u64,
) -> Result<Vec<EpisodeSpec>> {
    if n_agents == 0 {
        return Err(Error::config("n_agents must be positive"));
    }
    let constraints = EpisodeConstraints::for_kind(scene.kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1));
    let cells = scene.navigable_cells();
    let target_fields: Vec<DistanceField> =
        scene.targets.iter().map(|t| DistanceField::new(scene, t.cell)).collect();
    let active: Vec<usize> = (0..scene.targets.len()).collect();

    // Starts must satisfy the start-goal band for every active target.
    let candidates: Vec<Cell> = cells
        .iter()
        .copied()
        .filter(|&c| {
            target_fields.iter().all(|f| constraints.start_goal_ok(f.get(c)))
                && !scene.targets.iter().any(|t| t.cell == c)
        })
        .collect();
    if candidates.len() < n_agents {
        return Err(Error::invalid(format!(
            "{}: only {} start cells satisfy the start-goal constraints (need {n_agents})",
            scene.kind,
            candidates.len()
        )));
    }

    let mut out = Vec::with_capacity(count);
    const ATTEMPTS: usize = 20_000;
    for id in 0..count {
        let mut starts: Option<Vec<AgentStart>> = None;
        'attempt: for _ in 0..ATTEMPTS {
            let mut picked: Vec<AgentStart> = Vec::with_capacity(n_agents);
            let mut fields: Vec<DistanceField> = Vec::with_capacity(n_agents);
            for _ in 0..n_agents {
                let cell = candidates[rng.gen_range(0..candidates.len())];
                let ok = fields
                    .iter()
                    .all(|f| f.get(cell).map_or(false, |d| d >= constraints.inter_agent_min));
                if !ok {
                    continue 'attempt;
                }
                fields.push(DistanceField::new(scene, cell));
                picked.push(AgentStart { cell, heading: rng.gen_range(0..4u8) });
            }
            starts = Some(picked);
            break;
        }
        let starts = starts.ok_or_else(|| {
            Error::invalid(format!(
                "{}: failed to sample {} separated starts after {ATTEMPTS} attempts",
                scene.kind, n_agents
            ))
        })?;
        let split = if id % 4 == 3 { Split::Val } else { Split::Train };
        let spec = EpisodeSpec {
            id: id as u32,
            split,
            starts,
            targets: active.clone(),
            audio_seed: rng.gen(),
        };
        verify_episode(scene, &spec, &constraints)?;
        out.push(spec);
    }
    Ok(out)
}

/// Re-checks every constraint with fresh searches; used both after
/// generation and when loading datasets from disk.
pub fn verify_episode(
    scene: &Scene,
    spec: &EpisodeSpec,
    constraints: &EpisodeConstraints,
) -> Result<()> {
    for &ti in &spec.targets {
        if ti >= scene.targets.len() {
            return Err(Error::format(format!("episode {}: target index {ti} out of range", spec.id)));
        }
    }
    for (i, s) in spec.starts.iter().enumerate() {
        if !scene.navigable(s.cell) {
            return Err(Error::format(format!("episode {}: start {i} on a wall", spec.id)));
        }
        if s.heading >= 4 {
            return Err(Error::format(format!("episode {}: bad heading", spec.id)));
        }
        let field = DistanceField::new(scene, s.cell);
        for &ti in &spec.targets {
            let d = field.get(scene.targets[ti].cell);
            if !constraints.start_goal_ok(d) {
                return Err(Error::invalid(format!(
                    "episode {}: start {i} to target {ti} distance {d:?} outside bounds",
                    spec.id
                )));
            }
        }
        for (j, other) in spec.starts.iter().enumerate().skip(i + 1) {
            match field.get(other.cell) {
                Some(d) if d >= constraints.inter_agent_min => {}
                d => {
                    return Err(Error::invalid(format!(
                        "episode {}: starts {i} and {j} too close ({d:?})",
                        spec.id
                    )))
                }
            }
        }
    }
    Ok(())
}

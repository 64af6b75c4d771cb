//! The navigation environment: deterministic joint-action stepping
//! over a fixed scene, sound-source bookkeeping, reward computation,
//! and per-episode metrics.
//!
//! Invariants the tests lean on: found flags are monotone, the active
//! sound set always equals the unfound-target set, and a (spec, action
//! sequence) pair replays to an identical trace.

pub mod metrics;
pub mod reward;
pub mod trace;

pub use metrics::{bootstrap_mean_ci, Aggregate, EpisodeMetrics, MetricSummary};
pub use reward::{RewardSpec, StepFacts};
pub use trace::{verify_trace_accounting, EpisodeTrace, StepRecord};

use crate::error::{Error, Result};
use crate::scene::{
    geodesic::DistanceField, heading_delta, Cell, EpisodeSpec, Pose, Scene, Target, NUM_CATEGORIES,
};
use crate::sensors::{
    render_depth, stft_spectrogram, synthesize_source, AudioConfig, Binaural, DepthConfig,
    DepthImage, Spectrogram, StftParams,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Stop,
}

pub const NUM_ACTIONS: usize = 4;

impl Action {
    pub fn index(&self) -> usize {
        match self {
            Action::MoveForward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        [Action::MoveForward, Action::TurnLeft, Action::TurnRight, Action::Stop]
            .get(i)
            .copied()
    }
}

/// Which sensors an agent carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentModalities {
    pub depth: bool,
    pub audio: bool,
}

impl AgentModalities {
    pub fn both() -> Self {
        AgentModalities { depth: true, audio: true }
    }
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub success_radius: f64,
    /// When false, observations carry only pose and goal vector; used
    /// by reward accounting and replay where sensors are not needed.
    pub render_observations: bool,
    pub audio: AudioConfig,
    pub depth: DepthConfig,
    pub stft: StftParams,
    /// Alternative reading of the maze progressive scale: attach the
    /// 1.5 factor to the distance term instead of the goal term.
    pub maze_progressive_on_distance: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            success_radius: 1.0,
            render_observations: true,
            audio: AudioConfig::default(),
            depth: DepthConfig::default(),
            stft: StftParams::default(),
            maze_progressive_on_distance: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub pose: Pose,
    /// Multi-hot over categories still to be found.
    pub goal: Vec<f64>,
    pub depth: Option<DepthImage>,
    pub spectrogram: Option<Spectrogram>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub terminal: bool,
    /// Target indices (into the episode target list) found this step.
    pub newly_found: Vec<usize>,
    pub stops: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct AgentState {
    cell: Cell,
    heading: u8,
}

impl AgentState {
    fn pose(&self, t: usize) -> Pose {
        Pose::at_cell(self.cell, self.heading, t)
    }
}

pub struct NavEnv<'a> {
    scene: &'a Scene,
    spec: EpisodeSpec,
    modalities: Vec<AgentModalities>,
    cfg: EnvConfig,
    reward: RewardSpec,
    horizon: usize,
    agents: Vec<AgentState>,
    /// found[j] refers to spec.targets[j].
    found: Vec<bool>,
    t: usize,
    terminal: bool,
    /// Geodesic field per episode target, reused for rewards, stop
    /// checks, and audio attenuation.
    fields: Vec<DistanceField>,
    monos: Vec<Vec<f64>>,
}

impl<'a> NavEnv<'a> {
    pub fn new(
        scene: &'a Scene,
        spec: &EpisodeSpec,
        modalities: &[AgentModalities],
        cfg: &EnvConfig,
    ) -> Result<NavEnv<'a>> {
        if spec.starts.is_empty() {
            return Err(Error::invalid("episode has no agents"));
        }
        if modalities.len() != spec.starts.len() {
            return Err(Error::config(format!(
                "{} modality entries for {} agents",
                modalities.len(),
                spec.starts.len()
            )));
        }
        if spec.targets.is_empty() {
            return Err(Error::invalid("episode has no targets"));
        }
        let wants_audio = modalities.iter().any(|m| m.audio);
        if cfg.render_observations && wants_audio && cfg.audio.samples_per_step < cfg.stft.n_fft {
            return Err(Error::config(format!(
                "samples_per_step {} < n_fft {}",
                cfg.audio.samples_per_step, cfg.stft.n_fft
            )));
        }
        for s in &spec.starts {
            if !scene.navigable(s.cell) || s.heading >= 4 {
                return Err(Error::invalid("start pose not navigable"));
            }
        }
        for &ti in &spec.targets {
            if ti >= scene.targets.len() {
                return Err(Error::invalid("target index out of range"));
            }
        }
        let fields: Vec<DistanceField> = spec
            .targets
            .iter()
            .map(|&ti| DistanceField::new(scene, scene.targets[ti].cell))
            .collect();
        let monos = if cfg.render_observations {
            spec.targets
                .iter()
                .enumerate()
                .map(|(j, &ti)| {
                    synthesize_source(
                        scene.targets[ti].category,
                        cfg.audio.samples_per_step,
                        cfg.audio.sample_rate,
                        spec.audio_seed ^ (j as u64),
                    )
                })
                .collect()
        } else {
            vec![Vec::new(); spec.targets.len()]
        };
        let mut env = NavEnv {
            scene,
            spec: spec.clone(),
            modalities: modalities.to_vec(),
            cfg: cfg.clone(),
            reward: RewardSpec::for_episode(scene.kind, spec.targets.len()),
            horizon: scene.kind.horizon(),
            agents: Vec::new(),
            found: Vec::new(),
            t: 0,
            terminal: false,
            fields,
            monos,
        };
        env.reset();
        Ok(env)
    }

    pub fn reset(&mut self) -> Vec<Observation> {
        self.agents = self
            .spec
            .starts
            .iter()
            .map(|s| AgentState { cell: s.cell, heading: s.heading })
            .collect();
        self.found = vec![false; self.spec.targets.len()];
        self.t = 0;
        self.terminal = false;
        self.observations()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_targets(&self) -> usize {
        self.spec.targets.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn found(&self) -> &[bool] {
        &self.found
    }

    pub fn scene(&self) -> &Scene {
        self.scene
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    /// Geodesic field per episode target, in target order.
    pub fn fields(&self) -> &[DistanceField] {
        &self.fields
    }

    /// Episode targets resolved against the scene, in target order.
    pub fn targets(&self) -> Vec<Target> {
        self.spec.targets.iter().map(|&ti| self.scene.targets[ti].clone()).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.agents.iter().map(|a| a.pose(self.t)).collect()
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.agents.iter().map(|a| a.cell).collect()
    }

    pub fn heading_indices(&self) -> Vec<u8> {
        self.agents.iter().map(|a| a.heading).collect()
    }

    /// Step and append the step record to a trace in one call.
    pub fn step_traced(&mut self, actions: &[Action], trace: &mut EpisodeTrace) -> Result<StepOutcome> {
        let out = self.step(actions)?;
        trace.records.push(StepRecord {
            t: self.t,
            actions: actions.iter().map(|a| a.index()).collect(),
            cells: self.cells(),
            headings: self.heading_indices(),
            reward: out.reward,
            newly_found: out.newly_found.clone(),
            stops: out.stops.clone(),
        });
        Ok(out)
    }

    /// Goal multi-hot over the categories of unfound targets.
    pub fn goal_vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; NUM_CATEGORIES];
        for (j, &ti) in self.spec.targets.iter().enumerate() {
            if !self.found[j] {
                v[self.scene.targets[ti].category.index()] = 1.0;
            }
        }
        v
    }

    /// World location and category index of the nearest unfound target
    /// to the agent, used as belief supervision. None once everything
    /// is found.
    pub fn nearest_unfound(&self, agent: usize) -> Option<(Cell, usize, f64)> {
        let cell = self.agents[agent].cell;
        let mut best: Option<(Cell, usize, f64)> = None;
        for (j, &ti) in self.spec.targets.iter().enumerate() {
            if self.found[j] {
                continue;
            }
            let d = match self.fields[j].get(cell) {
                Some(d) => d,
                None => continue,
            };
            if best.map_or(true, |(_, _, bd)| d < bd) {
                let t = &self.scene.targets[ti];
                best = Some((t.cell, t.category.index(), d));
            }
        }
        best
    }

    fn observations(&self) -> Vec<Observation> {
        let goal = self.goal_vector();
        (0..self.agents.len())
            .map(|i| {
                let pose = self.agents[i].pose(self.t);
                if !self.cfg.render_observations {
                    return Observation { pose, goal: goal.clone(), depth: None, spectrogram: None };
                }
                let depth = self.modalities[i]
                    .depth
                    .then(|| render_depth(self.scene, &pose, &self.cfg.depth));
                let spectrogram = if self.modalities[i].audio {
                    Some(self.render_audio(&pose))
                } else {
                    None
                };
                Observation { pose, goal: goal.clone(), depth, spectrogram }
            })
            .collect()
    }

    /// Mix every unfound target's signature and take its spectrogram.
    fn render_audio(&self, pose: &Pose) -> Spectrogram {
        let mut wave =
            Binaural::silence(self.cfg.audio.samples_per_step, self.cfg.audio.sample_rate);
        for (j, &ti) in self.spec.targets.iter().enumerate() {
            if self.found[j] {
                continue;
            }
            let cell = self.scene.targets[ti].cell;
            if let Some(d) = self.fields[j].get(pose.cell()) {
                let sin_phi = crate::sensors::audio::bearing_sin(pose, cell);
                crate::sensors::audio::mix_source(
                    &mut wave,
                    &self.monos[j],
                    d,
                    sin_phi,
                    &self.cfg.audio,
                );
            }
        }
        stft_spectrogram(&wave, &self.cfg.stft).expect("samples_per_step >= n_fft")
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        if self.terminal {
            return Err(Error::invalid("step on terminal episode"));
        }
        if actions.len() != self.agents.len() {
            return Err(Error::invalid("one action per agent required"));
        }
        let unfound_before: Vec<usize> =
            (0..self.found.len()).filter(|&j| !self.found[j]).collect();
        let prev_cells: Vec<Cell> = self.agents.iter().map(|a| a.cell).collect();

        // Movement phase.
        for (agent, action) in self.agents.iter_mut().zip(actions) {
            match action {
                Action::MoveForward => {
                    let (dx, dy) = heading_delta(agent.heading);
                    let nx = agent.cell.0 as isize + dx;
                    let ny = agent.cell.1 as isize + dy;
                    if !self.scene.blocked(nx, ny) {
                        agent.cell = (nx as usize, ny as usize);
                    }
                }
                Action::TurnLeft => agent.heading = (agent.heading + 1) % 4,
                Action::TurnRight => agent.heading = (agent.heading + 3) % 4,
                Action::Stop => {}
            }
        }

        // Discovery phase: a stopping agent claims the nearest unfound
        // target within the success radius (lowest index on ties).
        let stops: Vec<bool> = actions.iter().map(|a| *a == Action::Stop).collect();
        let mut newly_found = Vec::new();
        let mut success_stops = vec![false; self.agents.len()];
        for i in 0..self.agents.len() {
            if !stops[i] {
                continue;
            }
            let cell = self.agents[i].cell;
            let mut best: Option<(usize, f64)> = None;
            for &j in &unfound_before {
                if self.found[j] {
                    continue;
                }
                if let Some(d) = self.fields[j].get(cell) {
                    if d <= self.cfg.success_radius && best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((j, d));
                    }
                }
            }
            if let Some((j, _)) = best {
                self.found[j] = true;
                newly_found.push(j);
                success_stops[i] = true;
            } else if self.reward.single_target {
                // Single-target success credit goes to every agent
                // stopping in radius, even after a same-step claim.
                let d = self.fields[0].get(cell);
                if unfound_before.contains(&0)
                    && d.map_or(false, |d| d <= self.cfg.success_radius)
                {
                    success_stops[i] = true;
                }
            }
        }

        let new_cells: Vec<Cell> = self.agents.iter().map(|a| a.cell).collect();
        let reward = self.reward.team_reward(&reward::StepFacts {
            fields: &self.fields,
            unfound_before: &unfound_before,
            prev_cells: &prev_cells,
            new_cells: &new_cells,
            stops: &stops,
            success_stops: &success_stops,
            newly_found: &newly_found,
            n_total: self.found.len(),
            progressive_on_distance: self.cfg.maze_progressive_on_distance,
        });

        self.t += 1;
        let all_found = self.found.iter().all(|f| *f);
        let all_stopped = stops.iter().all(|s| *s);
        self.terminal = all_found || all_stopped || self.t >= self.horizon;

        debug_assert!(self.sound_set_matches_unfound());
        Ok(StepOutcome {
            observations: self.observations(),
            reward,
            terminal: self.terminal,
            newly_found,
            stops,
        })
    }

    /// The active sound set is exactly the unfound-target set.
    pub fn sound_set_matches_unfound(&self) -> bool {
        // Sounds are derived from `found` on demand, so this checks the
        // derivation stays total: every unfound target has a waveform.
        self.found.len() == self.monos.len() && self.found.len() == self.fields.len()
    }

    pub fn active_source_count(&self) -> usize {
        self.found.iter().filter(|f| !*f).count()
    }

    pub fn metrics(&self) -> Result<EpisodeMetrics> {
        if !self.terminal {
            return Err(Error::invalid("metrics requested before termination"));
        }
        let n_found = self.found.iter().filter(|f| **f).count();
        let success = n_found == self.found.len();
        let dist = self
            .agents
            .iter()
            .map(|a| {
                self.fields
                    .iter()
                    .filter_map(|f| f.get(a.cell))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / self.agents.len() as f64;
        Ok(EpisodeMetrics {
            success,
            steps: self.t,
            timeout: !success && self.t >= self.horizon,
            dist,
            detect: n_found as f64,
        })
    }
}

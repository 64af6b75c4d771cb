//! Run configuration: method presets, size profiles, hyperparameters,
//! and TOML round-tripping with full validation.
//!
//! Every knob a training run needs lives in one `TrainConfig` so the
//! snapshot written into a run directory fully determines the run.

use crate::belief::{BeliefNetConfig, GoalMetric};
use crate::env::{AgentModalities, EnvConfig};
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::scene::SceneKind;
use crate::sensors::StftParams;
use serde::{Deserialize, Serialize};

/// Method presets as modality assignments. `crona` pairs a hearing
/// specialist with a seeing specialist; the `-collab` baselines give
/// both agents the same sensor set; `single` is one agent carrying
/// everything. The goal vector (the "language" channel) is always
/// present regardless of preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Crona,
    AvlaCollab,
    VlaCollab,
    AlaCollab,
    Single,
}

impl Preset {
    pub fn all() -> [Preset; 5] {
        [Preset::Crona, Preset::AvlaCollab, Preset::VlaCollab, Preset::AlaCollab, Preset::Single]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Crona => "crona",
            Preset::AvlaCollab => "avla-collab",
            Preset::VlaCollab => "vla-collab",
            Preset::AlaCollab => "ala-collab",
            Preset::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        match s.to_ascii_lowercase().as_str() {
            "crona" => Ok(Preset::Crona),
            "avla-collab" | "avla" => Ok(Preset::AvlaCollab),
            "vla-collab" | "vla" => Ok(Preset::VlaCollab),
            "ala-collab" | "ala" => Ok(Preset::AlaCollab),
            "single" | "single-agent" => Ok(Preset::Single),
            other => Err(Error::config(format!("unknown preset '{other}'"))),
        }
    }

    /// Per-agent sensor sets; agent order is part of the contract
    /// (crona: hearing agent first).
    pub fn modalities(&self) -> Vec<AgentModalities> {
        let audio = AgentModalities { depth: false, audio: true };
        let depth = AgentModalities { depth: true, audio: false };
        let both = AgentModalities::both();
        match self {
            Preset::Crona => vec![audio, depth],
            Preset::AvlaCollab => vec![both, both],
            Preset::VlaCollab => vec![depth, depth],
            Preset::AlaCollab => vec![audio, audio],
            Preset::Single => vec![both],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.modalities().len()
    }
}

/// Network and sensor widths. `full` is the published scale; `smoke`
/// shrinks every width so a single core can run tests and the learning
/// smoke experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Smoke,
}

impl Profile {
    pub fn name(&self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Smoke => "smoke",
        }
    }

    pub fn parse(s: &str) -> Result<Profile> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Profile::Full),
            "smoke" => Ok(Profile::Smoke),
            other => Err(Error::config(format!("unknown profile '{other}'"))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Everything a run needs. Serialized verbatim into `config.snapshot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scene: SceneKind,
    pub preset: Preset,
    pub profile: Profile,
    /// Master seed for parameters, action sampling, and episode order.
    pub seed: u64,
    /// Seed for procedural scene layout.
    pub scene_seed: u64,
    /// Episode dataset size (split 3:1 into train and validation).
    pub episodes: usize,

    pub gamma: f64,
    pub lam: f64,
    /// PPO policy ratio clip.
    pub clip_eps: f64,
    /// PPO value clip.
    pub value_clip: f64,
    /// Policy-value mixing coefficient in the shared-module loss.
    pub mu: f64,
    pub entropy_beta: f64,
    /// Belief EMA smoothing coefficient.
    pub belief_alpha: f64,
    /// Weight of the belief supervision loss in the combined loss.
    pub belief_weight: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub rollout_steps: usize,
    pub grad_clip: f64,
    pub updates: usize,
    pub advantage_norm: bool,
    pub n_envs: usize,

    pub eval_every: usize,
    pub eval_episodes: usize,
    pub checkpoint_every: usize,

    /// Overrides the profile's modality embedding width when set.
    pub embedding_size: Option<usize>,
    /// Overrides the depth sensor resolution (square) when set.
    pub depth_resolution: Option<usize>,

    /// Ablation switches: when false the corresponding belief slots
    /// (or the critic's global state row) are zeroed at the network
    /// inputs; the rest of the pipeline is unchanged.
    #[serde(default = "default_true")]
    pub use_location_belief: bool,
    #[serde(default = "default_true")]
    pub use_category_belief: bool,
    #[serde(default = "default_true")]
    pub use_critic_state: bool,

    /// Supervise beliefs with straight-line instead of geodesic
    /// nearest-target selection.
    pub euclidean_goal_metric: bool,
    /// Move the maze progressive multiplier onto the distance term.
    pub maze_progressive_on_distance: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            scene: SceneKind::Studio,
            preset: Preset::Crona,
            profile: Profile::Full,
            seed: 0,
            scene_seed: 0,
            episodes: 64,
            gamma: 0.99,
            lam: 0.95,
            clip_eps: 0.2,
            value_clip: 0.25,
            mu: 0.67,
            entropy_beta: 0.05,
            belief_alpha: 0.5,
            belief_weight: 1.0,
            actor_lr: 0.00025,
            critic_lr: 0.0002,
            epochs: 2,
            minibatches: 1,
            rollout_steps: 150,
            grad_clip: 0.2,
            updates: 8000,
            advantage_norm: false,
            n_envs: 1,
            eval_every: 50,
            eval_episodes: 16,
            checkpoint_every: 500,
            embedding_size: None,
            depth_resolution: None,
            use_location_belief: true,
            use_category_belief: true,
            use_critic_state: true,
            euclidean_goal_metric: false,
            maze_progressive_on_distance: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
            Ok(())
        };
        unit("gamma", self.gamma)?;
        unit("lam", self.lam)?;
        unit("mu", self.mu)?;
        unit("belief_alpha", self.belief_alpha)?;
        let positive = |name: &str, v: f64| -> Result<()> {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} = {v} must be positive")));
            }
            Ok(())
        };
        positive("clip_eps", self.clip_eps)?;
        positive("value_clip", self.value_clip)?;
        positive("actor_lr", self.actor_lr)?;
        positive("critic_lr", self.critic_lr)?;
        positive("grad_clip", self.grad_clip)?;
        if self.entropy_beta < 0.0 || self.belief_weight < 0.0 {
            return Err(Error::config("entropy_beta and belief_weight must be >= 0"));
        }
        let at_least_one = [
            ("epochs", self.epochs),
            ("rollout_steps", self.rollout_steps),
            ("updates", self.updates),
            ("n_envs", self.n_envs),
            ("episodes", self.episodes),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in at_least_one {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.minibatches != 1 {
            // The update consumes the whole rollout as one batch; the
            // knob exists so configs state it explicitly.
            return Err(Error::config("only minibatches = 1 is supported"));
        }
        if self.episodes < 4 {
            return Err(Error::config("episodes must be >= 4 so the validation split is nonempty"));
        }
        if let Some(e) = self.embedding_size {
            if e == 0 {
                return Err(Error::config("embedding_size override must be positive"));
            }
        }
        if let Some(r) = self.depth_resolution {
            if r < 2 {
                return Err(Error::config("depth_resolution override must be >= 2"));
            }
        }
        self.policy()?;
        Ok(())
    }

    pub fn modalities(&self) -> Vec<AgentModalities> {
        self.preset.modalities()
    }

    /// Policy widths for the profile with overrides applied. The
    /// history cache never exceeds the rollout length; windows longer
    /// than the on-policy batch would attend over tokens the update
    /// graph cannot reproduce.
    pub fn policy(&self) -> Result<PolicyConfig> {
        let mut cfg = match self.profile {
            Profile::Full => PolicyConfig::full(),
            Profile::Smoke => PolicyConfig::smoke(),
        };
        if let Some(e) = self.embedding_size {
            cfg.embedding_size = e;
        }
        cfg.k = cfg.k.min(self.rollout_steps);
        if let Some(r) = self.depth_resolution {
            // The encoder consumes the sensor image resampled to its
            // own input edge, so the trunk shape is unaffected.
            if r > cfg.vision_input_hw && self.profile == Profile::Smoke {
                return Err(Error::config(format!(
                    "depth_resolution {r} exceeds the smoke encoder input {}",
                    cfg.vision_input_hw
                )));
            }
        }
        Ok(cfg)
    }

    pub fn belief(&self) -> BeliefNetConfig {
        match self.profile {
            Profile::Full => BeliefNetConfig::full(),
            Profile::Smoke => BeliefNetConfig::smoke(),
        }
    }

    pub fn goal_metric(&self) -> GoalMetric {
        if self.euclidean_goal_metric {
            GoalMetric::Euclidean
        } else {
            GoalMetric::Geodesic
        }
    }

    pub fn env(&self) -> EnvConfig {
        let mut cfg = EnvConfig::default();
        cfg.maze_progressive_on_distance = self.maze_progressive_on_distance;
        if let Some(r) = self.depth_resolution {
            cfg.depth.width = r;
            cfg.depth.height = r;
        }
        if self.profile == Profile::Smoke {
            // A quarter second of audio and a smaller FFT keep the
            // sensor path cheap; spectrograms are resampled to the
            // encoder input anyway.
            cfg.audio.samples_per_step = 4000;
            cfg.stft = StftParams { n_fft: 256, hop: 128, ..StftParams::default() };
            cfg.depth.width = self.depth_resolution.unwrap_or(8);
            cfg.depth.height = cfg.depth.width;
        }
        cfg
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format(format!("config encode: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

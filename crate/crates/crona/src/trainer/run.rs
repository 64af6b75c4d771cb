//! Training runs as on-disk artifacts. A run directory owns a config
//! snapshot, the frozen episode dataset, an append-only metrics log,
//! periodic greedy evaluations, and binary checkpoints; `train` can
//! start one fresh or resume it from the latest checkpoint. Evaluation
//! and replay execute policies exactly as collection does but greedily
//! and without ever constructing critic inputs.

use crate::belief::{supervision_for, Belief};
use crate::config::TrainConfig;
use crate::env::{EpisodeMetrics, EpisodeTrace, MetricSummary, NavEnv, Observation};
use crate::error::{Error, Result};
use crate::policy::{HistoryCache, PolicySet, StateSpec};
use crate::scene::generate::generate;
use crate::scene::{generate_episodes, Dataset, EpisodeSpec, Pose, Scene};
use crate::tensor::checkpoint::{self, Checkpoint};
use crate::tensor::{AdamConfig, AdamState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use super::rollout::{commit_belief_features, Collector};
use super::update::joint_update;

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const METRICS_LOG: &str = "metrics.log";
pub const EVAL_LOG: &str = "eval.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EPISODES_DIR: &str = "episodes";

/// One line of `metrics.log`, emitted after every update. Episode
/// fields are means over episodes that terminated during the rollout
/// and absent when none did. No wall-clock data, so identical runs
/// produce identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based count of completed updates.
    pub update: u64,
    pub combined: f64,
    pub j_mean: f64,
    pub value_loss: f64,
    pub belief_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub episodes: usize,
    pub ret: Option<f64>,
    pub success: Option<f64>,
    pub dist: Option<f64>,
    pub detect: Option<f64>,
    pub steps: Option<f64>,
    pub timeout: Option<f64>,
}

/// One line of `eval.log`: a greedy pass over the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub update: u64,
    pub mean_return: f64,
    pub summary: MetricSummary,
}

#[derive(Debug)]
pub struct EvalReport {
    pub metrics: Vec<EpisodeMetrics>,
    pub returns: Vec<f64>,
    pub traces: Vec<EpisodeTrace>,
    pub summary: MetricSummary,
}

impl EvalReport {
    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        if self.metrics.is_empty() {
            return 0.0;
        }
        let s = self.metrics.iter().filter(|m| m.success).count();
        s as f64 / self.metrics.len() as f64
    }
}

/// Per-step belief trace for one audio agent: the committed EMA
/// location estimate next to the label it was trained toward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefTraceRow {
    pub t: usize,
    pub agent: usize,
    /// World-frame EMA location estimate after this step's update.
    pub predicted: (f64, f64),
    /// World-frame nearest reachable unfound target, if any remain.
    pub true_goal: Option<(f64, f64)>,
}

/// Everything a replay of one episode produces.
#[derive(Debug)]
pub struct ReplayArtifacts {
    pub trace: EpisodeTrace,
    pub ret: f64,
    pub metrics: EpisodeMetrics,
    pub beliefs: Vec<BeliefTraceRow>,
    /// Agent poses indexed [step][agent], starting before the first
    /// action, so one more row than there are steps.
    pub poses: Vec<Vec<Pose>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// Updates already completed when this call began (0 when fresh).
    pub start_update: u64,
    pub end_update: u64,
    pub last_checkpoint: PathBuf,
}

pub fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let line = serde_json::to_string(row).map_err(|e| Error::format(e.to_string()))?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(e.to_string()))?);
    }
    Ok(out)
}

/// Steps one episode to termination under greedy action selection,
/// reusing the exact collection-time preprocessing and belief path.
/// Never builds a critic input or a state feature; actions depend on
/// local observations and local beliefs only.
fn run_greedy_episode(
    set: &PolicySet,
    scene: &Scene,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&NavEnv, &[Observation], &[Belief], usize),
) -> Result<(EpisodeTrace, f64, EpisodeMetrics, Vec<Vec<Pose>>)> {
    let env_cfg = cfg.env();
    let mods = cfg.modalities();
    let mut env = NavEnv::new(scene, spec, &mods, &env_cfg)?;
    let mut obs = env.reset();
    let n = set.n_agents();
    let mut caches: Vec<HistoryCache> = (0..n).map(|_| HistoryCache::new(set.cfg.k)).collect();
    let mut beliefs = vec![Belief::empty(set.cfg.n_categories); n];
    let mut prev: Vec<Option<usize>> = vec![None; n];
    // Greedy selection never consumes randomness; the stream exists
    // only to satisfy the sampling interface.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = EpisodeTrace::new(spec);
    let mut poses = vec![env.poses()];
    let mut ret = 0.0;
    let max_depth = env_cfg.depth.max_depth;

    let mut t = 0usize;
    while !env.is_terminal() {
        let features = commit_belief_features(set, cfg, &obs, &mut beliefs)?;
        on_step(&env, &obs, &beliefs, t);
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let frame = crate::policy::preprocess_observation(
                &set.cfg,
                set.agents[i].modalities,
                &obs[i],
                prev[i],
                max_depth,
                scene.width,
                scene.height,
                env.horizon(),
            )?;
            let act = set.agents[i].act(
                &set.store,
                &mut caches[i],
                &frame,
                &features[i],
                &mut rng,
                true,
            )?;
            actions.push(act.action);
        }
        let outcome = env.step_traced(&actions, &mut trace)?;
        obs = outcome.observations;
        for (i, a) in actions.iter().enumerate() {
            prev[i] = Some(a.index());
        }
        ret += outcome.reward;
        poses.push(env.poses());
        t += 1;
    }
    let metrics = env.metrics()?;
    Ok((trace, ret, metrics, poses))
}

/// Greedy evaluation over a fixed episode list with fresh caches and
/// beliefs per episode. Identical inputs give identical reports.
pub fn evaluate(
    set: &PolicySet,
    scene: &Scene,
    episodes: &[EpisodeSpec],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let mut metrics = Vec::with_capacity(episodes.len());
    let mut returns = Vec::with_capacity(episodes.len());
    let mut traces = Vec::with_capacity(episodes.len());
    for spec in episodes {
        let (trace, ret, m, _) = run_greedy_episode(set, scene, spec, cfg, |_, _, _, _| {})?;
        metrics.push(m);
        returns.push(ret);
        traces.push(trace);
    }
    let summary = MetricSummary::from_episodes(&metrics, cfg.seed);
    Ok(EvalReport { metrics, returns, traces, summary })
}

/// Replays one episode greedily and keeps the artifacts a viewer
/// needs: the verifiable trace, per-step poses, and the belief track
/// against the true goal.
pub fn replay_episode(
    set: &PolicySet,
    scene: &Scene,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
) -> Result<ReplayArtifacts> {
    let metric = cfg.goal_metric();
    let mut belief_rows: Vec<BeliefTraceRow> = Vec::new();
    let (trace, ret, metrics, poses) =
        run_greedy_episode(set, scene, spec, cfg, |env, obs, beliefs, t| {
            for i in 0..beliefs.len() {
                if set.beliefs[i].is_none() {
                    continue;
                }
                let true_goal = supervision_for(
                    env.scene(),
                    &env.targets(),
                    env.found(),
                    env.fields(),
                    &obs[i].pose,
                    metric,
                )
                .map(|s| s.goal_star);
                belief_rows.push(BeliefTraceRow {
                    t,
                    agent: i,
                    predicted: beliefs[i].loc,
                    true_goal,
                });
            }
        })?;
    Ok(ReplayArtifacts { trace, ret, metrics, beliefs: belief_rows, poses })
}

/// Fields that must match for a checkpointed run to continue under a
/// new config. Everything else (notably `updates`, so finished runs
/// can be extended) may change.
fn resume_compatible(old: &TrainConfig, new: &TrainConfig) -> Result<()> {
    let mut bad = Vec::new();
    if old.scene != new.scene {
        bad.push("scene");
    }
    if old.preset != new.preset {
        bad.push("preset");
    }
    if old.profile != new.profile {
        bad.push("profile");
    }
    if old.seed != new.seed {
        bad.push("seed");
    }
    if old.scene_seed != new.scene_seed {
        bad.push("scene_seed");
    }
    if old.episodes != new.episodes {
        bad.push("episodes");
    }
    if old.embedding_size != new.embedding_size {
        bad.push("embedding_size");
    }
    if old.depth_resolution != new.depth_resolution {
        bad.push("depth_resolution");
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "resume config changes identity fields: {}",
            bad.join(", ")
        )))
    }
}

/// Latest checkpoint in a run's checkpoint directory, by update index.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(PathBuf, u64)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(PathBuf, u64)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        let idx = match name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".bin")) {
            Some(digits) => match digits.parse::<u64>() {
                Ok(i) => i,
                Err(_) => continue,
            },
            None => continue,
        };
        if best.as_ref().map_or(true, |(_, b)| idx > *b) {
            best = Some((path, idx));
        }
    }
    Ok(best)
}

fn checkpoint_path(dir: &Path, update: u64) -> PathBuf {
    dir.join(format!("ckpt-{update:06}.bin"))
}

/// Drop log rows past `start_update`. A crash between checkpoints can
/// leave rows the restored parameters never produced; resuming rewinds
/// the logs to the checkpoint so indices stay gapless and consistent.
fn trim_log_to(path: &Path, start_update: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<serde_json::Value> = read_jsonl(path)?;
    let keep: Vec<&serde_json::Value> = rows
        .iter()
        .filter(|r| r.get("update").and_then(|u| u.as_u64()).map_or(false, |u| u <= start_update))
        .collect();
    if keep.len() == rows.len() {
        return Ok(());
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in keep {
        let line = serde_json::to_string(r).map_err(|e| Error::format(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn load_or_generate_dataset(dir: &Path, cfg: &TrainConfig) -> Result<Dataset> {
    let n_agents = cfg.modalities().len();
    if dir.join("scene.json").exists() {
        let ds = crate::scene::load_dataset(dir)?;
        if ds.scene.kind != cfg.scene {
            return Err(Error::config(format!(
                "run dataset is a {:?} scene but the config wants {:?}",
                ds.scene.kind, cfg.scene
            )));
        }
        if ds.n_agents != n_agents || ds.episodes.len() != cfg.episodes {
            return Err(Error::config(
                "run dataset does not match the configured agent count or episode count",
            ));
        }
        return Ok(ds);
    }
    let scene = generate(cfg.scene, cfg.scene_seed)?;
    let episodes = generate_episodes(&scene, cfg.episodes, n_agents, cfg.scene_seed)?;
    let ds = Dataset { scene, n_agents, episodes };
    crate::scene::save_dataset(dir, &ds)?;
    Ok(ds)
}

fn save_ckpt(
    dir: &Path,
    update: u64,
    config_text: &str,
    set: &PolicySet,
    adam: &AdamState,
) -> Result<PathBuf> {
    let path = checkpoint_path(dir, update);
    let ckpt = Checkpoint {
        config_text: config_text.to_string(),
        update_index: update,
        store: set.store.clone(),
        adam: Some(adam.clone()),
    };
    checkpoint::save(&path, &ckpt)?;
    Ok(path)
}

/// Restores parameters and optimizer state from a checkpoint into a
/// freshly built set. Registration order is deterministic, so after a
/// pairwise identity check the stores can be swapped wholesale.
fn restore(set: &mut PolicySet, adam: &mut AdamState, ckpt: Checkpoint) -> Result<()> {
    if ckpt.store.len() != set.store.len() {
        return Err(Error::config(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.store.len(),
            set.store.len()
        )));
    }
    for ((_, have), (_, want)) in ckpt.store.iter().zip(set.store.iter()) {
        if have.name != want.name || have.group != want.group || have.value.shape != want.value.shape
        {
            return Err(Error::config(format!(
                "checkpoint parameter {} does not match model parameter {}",
                have.name, want.name
            )));
        }
    }
    set.store = ckpt.store;
    *adam = match ckpt.adam {
        Some(a) => a,
        None => AdamState::for_store(&set.store),
    };
    Ok(())
}

/// Runs (or continues) training inside `run_dir` until `cfg.updates`
/// updates have completed, appending one metrics row per update,
/// evaluating the validation split every `eval_every` updates, and
/// checkpointing every `checkpoint_every` updates plus once at the end.
pub fn train(cfg: &TrainConfig, run_dir: &Path, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let snapshot_path = run_dir.join(CONFIG_SNAPSHOT);
    let metrics_path = run_dir.join(METRICS_LOG);
    let eval_path = run_dir.join(EVAL_LOG);
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    let episodes_dir = run_dir.join(EPISODES_DIR);

    if resume {
        if !snapshot_path.exists() {
            return Err(Error::config(format!(
                "cannot resume: {} has no config snapshot",
                run_dir.display()
            )));
        }
        let old = TrainConfig::from_toml(&std::fs::read_to_string(&snapshot_path)?)?;
        resume_compatible(&old, cfg)?;
    } else {
        if snapshot_path.exists() {
            return Err(Error::config(format!(
                "{} already holds a run; resume it or pick a fresh directory",
                run_dir.display()
            )));
        }
        std::fs::create_dir_all(run_dir)?;
    }
    let config_text = cfg.to_toml()?;
    std::fs::write(&snapshot_path, &config_text)?;
    std::fs::create_dir_all(&ckpt_dir)?;

    let dataset = load_or_generate_dataset(&episodes_dir, cfg)?;
    let scene = dataset.scene.clone();
    let train_eps: Vec<EpisodeSpec> = dataset.train().cloned().collect();
    let val_eps: Vec<EpisodeSpec> = dataset.val().cloned().collect();
    if cfg.eval_every > 0 && val_eps.is_empty() {
        return Err(Error::config(
            "evaluation is enabled but the validation split is empty; increase episodes",
        ));
    }

    let mods = cfg.modalities();
    let env_cfg = cfg.env();
    let probe = NavEnv::new(&scene, &train_eps[0], &mods, &env_cfg)?;
    let state_len = StateSpec::for_env(&probe).len();
    drop(probe);
    let mut set = PolicySet::new(cfg.policy()?, cfg.belief(), &mods, state_len, cfg.seed)?;
    let mut adam = AdamState::for_store(&set.store);
    let acfg = AdamConfig::default();

    let mut start_update = 0u64;
    let mut last_checkpoint = checkpoint_path(&ckpt_dir, 0);
    if resume {
        let (path, idx) = latest_checkpoint(&ckpt_dir)?.ok_or_else(|| {
            Error::config(format!("cannot resume: {} has no checkpoints", ckpt_dir.display()))
        })?;
        let ckpt = checkpoint::load(&path)?;
        if ckpt.update_index != idx {
            return Err(Error::format(format!(
                "checkpoint {} reports update {} but is named for {}",
                path.display(),
                ckpt.update_index,
                idx
            )));
        }
        restore(&mut set, &mut adam, ckpt)?;
        start_update = idx;
        last_checkpoint = path;
        trim_log_to(&metrics_path, start_update)?;
        trim_log_to(&eval_path, start_update)?;
    }

    let mut collector = Collector::new(&scene, train_eps, cfg, &set)?;
    let eval_slice: Vec<EpisodeSpec> = if val_eps.is_empty() {
        Vec::new()
    } else {
        val_eps.iter().cycle().take(cfg.eval_episodes).cloned().collect()
    };

    let total = cfg.updates as u64;
    let mut completed = start_update;
    while completed < total {
        let batch = collector.collect(&set)?;
        let stats = joint_update(&mut set, &mut adam, &acfg, &batch, cfg, completed as usize)?;
        completed += 1;

        let fin = &batch.finished;
        let mean =
            |f: &dyn Fn(&crate::trainer::FinishedEpisode) -> f64| -> Option<f64> {
                if fin.is_empty() {
                    None
                } else {
                    Some(fin.iter().map(f).sum::<f64>() / fin.len() as f64)
                }
            };
        let row = MetricsRow {
            update: completed,
            combined: stats.combined,
            j_mean: stats.j_mean,
            value_loss: stats.value_loss,
            belief_loss: stats.belief_loss,
            entropy: stats.entropy,
            grad_norm: stats.grad_norm,
            episodes: fin.len(),
            ret: mean(&|e| e.ret),
            success: mean(&|e| e.metrics.success as u8 as f64),
            dist: mean(&|e| e.metrics.dist),
            detect: mean(&|e| e.metrics.detect),
            steps: mean(&|e| e.metrics.steps as f64),
            timeout: mean(&|e| e.metrics.timeout as u8 as f64),
        };
        append_jsonl(&metrics_path, &row)?;

        if cfg.eval_every > 0 && completed % cfg.eval_every as u64 == 0 {
            let report = evaluate(&set, &scene, &eval_slice, cfg)?;
            let eval_row = EvalRow {
                update: completed,
                mean_return: report.mean_return(),
                summary: report.summary,
            };
            append_jsonl(&eval_path, &eval_row)?;
        }
        if cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every as u64 == 0 {
            last_checkpoint = save_ckpt(&ckpt_dir, completed, &config_text, &set, &adam)?;
        }
    }

    if completed > start_update && !checkpoint_path(&ckpt_dir, completed).exists() {
        last_checkpoint = save_ckpt(&ckpt_dir, completed, &config_text, &set, &adam)?;
    }
    Ok(TrainSummary { start_update, end_update: completed, last_checkpoint })
}

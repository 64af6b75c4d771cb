//! On-policy collection. Each parallel environment runner steps its
//! own episode stream with a read-only parameter snapshot, recording
//! everything the update graph needs to replay the decisions exactly:
//! preprocessed frames, actions with their log-probabilities, belief
//! features as the policies saw them, critic inputs, and per-segment
//! cache context so truncated episodes rebuild the same attention
//! windows.

use crate::belief::{ema_update, supervision_for, Belief, GoalMetric};
use crate::config::TrainConfig;
use crate::env::{AgentModalities, EnvConfig, EpisodeMetrics, NavEnv, Observation};
use crate::error::{Error, Result};
use crate::par;
use crate::policy::{
    preprocess_observation, state_feature, CachedStep, FrameInput, HistoryCache, PolicySet,
    StateSpec,
};
use crate::scene::{EpisodeSpec, Scene, Target};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gae::{compute_gae, normalize_advantages};

/// One maximal run of steps belonging to a single episode within the
/// flattened batch. `ctx` holds each agent's cached steps from before
/// the segment, so the update graph can rebuild act-time windows.
#[derive(Debug, Clone)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
    pub ctx: Vec<Vec<CachedStep>>,
}

/// Per-agent slice of a rollout batch, step-aligned with the global
/// arrays. Belief supervision is sparse: only steps with an unfound
/// target produce a labeled row.
#[derive(Debug, Clone, Default)]
pub struct AgentRollout {
    pub frames: Vec<FrameInput>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    /// Flat [T, belief_len], exactly what the head consumed.
    pub beliefs: Vec<f64>,
    /// Flat [n_sup, 2, S, S] preprocessed spectrograms.
    pub belief_x: Vec<f64>,
    /// Flat [n_sup, 2] world-frame goal labels.
    pub belief_goal: Vec<f64>,
    /// Flat [n_sup, C] multi-hot category labels.
    pub belief_cat: Vec<f64>,
    pub n_sup: usize,
}

/// An episode that reached a terminal during collection.
#[derive(Debug, Clone)]
pub struct FinishedEpisode {
    pub metrics: EpisodeMetrics,
    pub ret: f64,
}

/// Everything one update consumes, flattened across environments.
/// Environment e owns steps [e * steps_per_env, (e+1) * steps_per_env).
#[derive(Debug)]
pub struct RolloutBatch {
    pub agents: Vec<AgentRollout>,
    pub rewards: Vec<f64>,
    /// 0 exactly at episode-terminal steps; advantage recursions and
    /// bootstrap values never cross a reset.
    pub mask: Vec<f64>,
    pub values_old: Vec<f64>,
    /// Flat [T, state_len] critic state rows (zeroed when ablated).
    pub states: Vec<f64>,
    pub state_len: usize,
    pub segments: Vec<Segment>,
    pub adv: Vec<f64>,
    pub ret: Vec<f64>,
    pub steps_per_env: usize,
    pub n_envs: usize,
    pub finished: Vec<FinishedEpisode>,
}

impl RolloutBatch {
    pub fn total_steps(&self) -> usize {
        self.steps_per_env * self.n_envs
    }
}

struct AgentStream {
    frames: Vec<FrameInput>,
    actions: Vec<usize>,
    logp_old: Vec<f64>,
    beliefs: Vec<f64>,
    belief_x: Vec<f64>,
    belief_goal: Vec<f64>,
    belief_cat: Vec<f64>,
    n_sup: usize,
}

struct EnvStream {
    agents: Vec<AgentStream>,
    rewards: Vec<f64>,
    mask: Vec<f64>,
    values_old: Vec<f64>,
    states: Vec<f64>,
    segments: Vec<Segment>,
    bootstrap: f64,
    finished: Vec<FinishedEpisode>,
}

/// Zero the ablated belief slots. Layout: [loc x, loc y, categories..].
pub fn mask_belief_feature(feature: &mut [f64], use_location: bool, use_category: bool) {
    if !use_location {
        feature[..2].fill(0.0);
    }
    if !use_category {
        feature[2..].fill(0.0);
    }
}

/// Current-step belief features in head layout, committing the EMA
/// update for audio agents. Rollouts, evaluation, and replay all go
/// through here so the features match bit for bit.
pub(crate) fn commit_belief_features(
    set: &PolicySet,
    cfg: &TrainConfig,
    obs: &[Observation],
    beliefs: &mut [Belief],
) -> Result<Vec<Vec<f64>>> {
    let mut features = Vec::with_capacity(set.n_agents());
    for i in 0..set.n_agents() {
        let feat = match &set.beliefs[i] {
            Some(net) => {
                let spec = obs[i].spectrogram.as_ref().ok_or_else(|| {
                    Error::invalid("belief preprocessing requires a rendered spectrogram")
                })?;
                let pred = net.predict(&set.store, spec, &obs[i].pose)?;
                ema_update(&mut beliefs[i], &pred, cfg.belief_alpha)?;
                beliefs[i].feature()
            }
            None => set.zero_belief(),
        };
        features.push(feat);
    }
    for f in &mut features {
        mask_belief_feature(f, cfg.use_location_belief, cfg.use_category_belief);
    }
    Ok(features)
}

struct Runner<'a> {
    idx: usize,
    env: NavEnv<'a>,
    obs: Vec<Observation>,
    caches: Vec<HistoryCache>,
    beliefs: Vec<Belief>,
    prev: Vec<Option<usize>>,
    targets: Vec<Target>,
    rng: ChaCha8Rng,
    /// Position in the strided episode schedule; episode index is
    /// `pos % len`, advancing by `n_envs` so parallel collection visits
    /// the same episodes in the same runner order as sequential.
    pos: usize,
    stride: usize,
    ep_return: f64,
    pending: Option<Result<EnvStream>>,
}

impl<'a> Runner<'a> {
    fn new(
        idx: usize,
        scene: &'a Scene,
        episodes: &[EpisodeSpec],
        cfg: &TrainConfig,
        env_cfg: &EnvConfig,
        mods: &[AgentModalities],
        seed: u64,
        set: &PolicySet,
    ) -> Result<Runner<'a>> {
        let spec = &episodes[idx % episodes.len()];
        let env = NavEnv::new(scene, spec, mods, env_cfg)?;
        let n = mods.len();
        let mut r = Runner {
            idx,
            env,
            obs: Vec::new(),
            caches: (0..n).map(|_| HistoryCache::new(set.cfg.k)).collect(),
            beliefs: vec![Belief::empty(set.cfg.n_categories); n],
            prev: vec![None; n],
            targets: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            pos: idx + cfg.n_envs,
            stride: cfg.n_envs,
            ep_return: 0.0,
            pending: None,
        };
        r.obs = r.env.reset();
        r.targets = r.env.targets();
        Ok(r)
    }

    fn advance_episode(
        &mut self,
        scene: &'a Scene,
        episodes: &[EpisodeSpec],
        env_cfg: &EnvConfig,
        mods: &[AgentModalities],
    ) -> Result<()> {
        let spec = &episodes[self.pos % episodes.len()];
        self.pos += self.stride;
        self.env = NavEnv::new(scene, spec, mods, env_cfg)?;
        self.obs = self.env.reset();
        self.targets = self.env.targets();
        for c in &mut self.caches {
            c.clear();
        }
        for b in &mut self.beliefs {
            *b = Belief::empty(b.cat.len());
        }
        self.prev.fill(None);
        self.ep_return = 0.0;
        Ok(())
    }

    fn commit_beliefs(&mut self, set: &PolicySet, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
        commit_belief_features(set, cfg, &self.obs, &mut self.beliefs)
    }

    /// Belief features for the observation after the last collected
    /// step, without committing the EMA. The next rollout's first
    /// commit on the same observation produces identical values.
    fn peek_beliefs(&self, set: &PolicySet, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
        let mut scratch = self.beliefs.clone();
        commit_belief_features(set, cfg, &self.obs, &mut scratch)
    }

    fn frame_for(&self, set: &PolicySet, cfg: &TrainConfig, agent: usize) -> Result<FrameInput> {
        let env_cfg = cfg.env();
        preprocess_observation(
            &set.cfg,
            set.agents[agent].modalities,
            &self.obs[agent],
            self.prev[agent],
            env_cfg.depth.max_depth,
            self.env.scene().width,
            self.env.scene().height,
            self.env.horizon(),
        )
    }

    fn state_row(&self, cfg: &TrainConfig, state_len: usize) -> Vec<f64> {
        if cfg.use_critic_state {
            state_feature(&self.env)
        } else {
            vec![0.0; state_len]
        }
    }

    fn collect(
        &mut self,
        scene: &'a Scene,
        episodes: &[EpisodeSpec],
        set: &PolicySet,
        cfg: &TrainConfig,
        metric: GoalMetric,
    ) -> Result<EnvStream> {
        let n = set.n_agents();
        let steps = cfg.rollout_steps;
        let state_len = set.critic.state_len;
        let env_cfg = cfg.env();
        let mods = cfg.modalities();
        let mut out = EnvStream {
            agents: (0..n)
                .map(|_| AgentStream {
                    frames: Vec::with_capacity(steps),
                    actions: Vec::with_capacity(steps),
                    logp_old: Vec::with_capacity(steps),
                    beliefs: Vec::with_capacity(steps * set.cfg.belief_feature_len()),
                    belief_x: Vec::new(),
                    belief_goal: Vec::new(),
                    belief_cat: Vec::new(),
                    n_sup: 0,
                })
                .collect(),
            rewards: Vec::with_capacity(steps),
            mask: Vec::with_capacity(steps),
            values_old: Vec::with_capacity(steps),
            states: Vec::with_capacity(steps * state_len),
            segments: Vec::new(),
            bootstrap: 0.0,
            finished: Vec::new(),
        };
        let snapshot_ctx =
            |caches: &[HistoryCache]| caches.iter().map(|c| c.iter().cloned().collect()).collect();
        let mut seg_start = 0usize;
        let mut seg_ctx: Vec<Vec<CachedStep>> = snapshot_ctx(&self.caches);

        for t in 0..steps {
            let features = self.commit_beliefs(set, cfg)?;

            // Supervision labels refer to the same observation the
            // nets just predicted from.
            for i in 0..n {
                if let Some(net) = &set.beliefs[i] {
                    if let Some(sup) = supervision_for(
                        scene,
                        &self.targets,
                        self.env.found(),
                        self.env.fields(),
                        &self.obs[i].pose,
                        metric,
                    ) {
                        let spec = self.obs[i].spectrogram.as_ref().ok_or_else(|| {
                            Error::invalid("belief supervision requires a rendered spectrogram")
                        })?;
                        let a = &mut out.agents[i];
                        a.belief_x.extend(net.preprocess(spec));
                        a.belief_goal.push(sup.goal_star.0);
                        a.belief_goal.push(sup.goal_star.1);
                        a.belief_cat.extend(sup.cat_star);
                        a.n_sup += 1;
                    }
                }
            }

            let mut actions = Vec::with_capacity(n);
            let mut z_rows = Vec::with_capacity(n);
            for i in 0..n {
                let frame = self.frame_for(set, cfg, i)?;
                let act = set.agents[i].act(
                    &set.store,
                    &mut self.caches[i],
                    &frame,
                    &features[i],
                    &mut self.rng,
                    false,
                )?;
                let a = &mut out.agents[i];
                a.frames.push(frame);
                a.actions.push(act.action.index());
                a.logp_old.push(act.log_prob);
                a.beliefs.extend_from_slice(&features[i]);
                z_rows.push(act.z);
                actions.push(act.action);
            }

            let state = self.state_row(cfg, state_len);
            let belief_flat: Vec<f64> = features.concat();
            let v = set.critic.value(&set.store, &z_rows, &belief_flat, &state)?;
            out.values_old.push(v);
            out.states.extend(state);

            let outcome = self.env.step(&actions)?;
            self.obs = outcome.observations;
            for (i, a) in actions.iter().enumerate() {
                self.prev[i] = Some(a.index());
            }
            self.ep_return += outcome.reward;
            out.rewards.push(outcome.reward);
            out.mask.push(if outcome.terminal { 0.0 } else { 1.0 });

            if outcome.terminal {
                out.finished.push(FinishedEpisode {
                    metrics: self.env.metrics()?,
                    ret: self.ep_return,
                });
                out.segments.push(Segment {
                    offset: seg_start,
                    len: t + 1 - seg_start,
                    ctx: std::mem::take(&mut seg_ctx),
                });
                seg_start = t + 1;
                self.advance_episode(scene, episodes, &env_cfg, &mods)?;
                seg_ctx = snapshot_ctx(&self.caches);
            }
        }

        if seg_start < steps {
            out.segments.push(Segment {
                offset: seg_start,
                len: steps - seg_start,
                ctx: seg_ctx,
            });
        }

        // Bootstrap for a truncated final episode: the value the
        // critic would assign at the next step, computed without
        // touching caches or beliefs.
        if out.mask[steps - 1] != 0.0 {
            let features = self.peek_beliefs(set, cfg)?;
            let mut z_rows = Vec::with_capacity(n);
            for i in 0..n {
                let frame = self.frame_for(set, cfg, i)?;
                z_rows.push(set.agents[i].peek_z(&set.store, &self.caches[i], &frame)?);
            }
            let state = self.state_row(cfg, state_len);
            let belief_flat: Vec<f64> = features.concat();
            out.bootstrap = set.critic.value(&set.store, &z_rows, &belief_flat, &state)?;
        }
        let _ = self.idx;
        Ok(out)
    }
}

/// Owns the parallel runners and the episode schedule for one training
/// run. Collection is deterministic for a fixed seed and runner count:
/// each runner has its own counter-based RNG stream and a strided slice
/// of the episode cycle.
pub struct Collector<'a> {
    runners: Vec<Runner<'a>>,
    scene: &'a Scene,
    episodes: Vec<EpisodeSpec>,
    cfg: TrainConfig,
    metric: GoalMetric,
}

impl<'a> Collector<'a> {
    /// `episodes` must be the training split, already verified.
    pub fn new(
        scene: &'a Scene,
        episodes: Vec<EpisodeSpec>,
        cfg: &TrainConfig,
        set: &PolicySet,
    ) -> Result<Collector<'a>> {
        if episodes.is_empty() {
            return Err(Error::config("collector needs a nonempty training split"));
        }
        let env_cfg = cfg.env();
        let mods = cfg.modalities();
        let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut runners = Vec::with_capacity(cfg.n_envs);
        for e in 0..cfg.n_envs {
            let seed = rand::Rng::gen::<u64>(&mut seeder);
            runners.push(Runner::new(e, scene, &episodes, cfg, &env_cfg, &mods, seed, set)?);
        }
        Ok(Collector {
            runners,
            scene,
            episodes,
            cfg: cfg.clone(),
            metric: cfg.goal_metric(),
        })
    }

    pub fn state_len(&self) -> usize {
        StateSpec::for_env(&self.runners[0].env).len()
    }

    /// One rollout of `rollout_steps * n_envs` transitions with GAE
    /// already computed.
    pub fn collect(&mut self, set: &PolicySet) -> Result<RolloutBatch> {
        let scene = self.scene;
        let episodes = &self.episodes;
        let cfg = &self.cfg;
        let metric = self.metric;
        // Hint forces a fork per runner; each one steps an entire
        // environment through encoder forward passes.
        par::for_each_chunk(&mut self.runners, cfg.n_envs.max(1), usize::MAX, |_, chunk| {
            let r = &mut chunk[0];
            let res = r.collect(scene, episodes, set, cfg, metric);
            r.pending = Some(res);
        });

        let n = set.n_agents();
        let steps = cfg.rollout_steps;
        let state_len = set.critic.state_len;
        let mut batch = RolloutBatch {
            agents: (0..n).map(|_| AgentRollout::default()).collect(),
            rewards: Vec::new(),
            mask: Vec::new(),
            values_old: Vec::new(),
            states: Vec::new(),
            state_len,
            segments: Vec::new(),
            adv: Vec::new(),
            ret: Vec::new(),
            steps_per_env: steps,
            n_envs: cfg.n_envs,
            finished: Vec::new(),
        };
        for runner in &mut self.runners {
            let stream = runner
                .pending
                .take()
                .ok_or_else(|| Error::invalid("runner produced no rollout"))??;
            let base = batch.rewards.len();
            for (i, a) in stream.agents.into_iter().enumerate() {
                let dst = &mut batch.agents[i];
                dst.frames.extend(a.frames);
                dst.actions.extend(a.actions);
                dst.logp_old.extend(a.logp_old);
                dst.beliefs.extend(a.beliefs);
                dst.belief_x.extend(a.belief_x);
                dst.belief_goal.extend(a.belief_goal);
                dst.belief_cat.extend(a.belief_cat);
                dst.n_sup += a.n_sup;
            }
            batch.rewards.extend(&stream.rewards);
            batch.mask.extend(&stream.mask);
            batch.values_old.extend(&stream.values_old);
            batch.states.extend(&stream.states);
            for seg in stream.segments {
                batch.segments.push(Segment { offset: base + seg.offset, ..seg });
            }
            batch.finished.extend(stream.finished);

            let mut values = stream.values_old;
            values.push(stream.bootstrap);
            let (adv, ret) = compute_gae(&stream.rewards, &values, &stream.mask, cfg.gamma, cfg.lam);
            batch.adv.extend(adv);
            batch.ret.extend(ret);
        }
        if cfg.advantage_norm {
            normalize_advantages(&mut batch.adv);
        }
        Ok(batch)
    }
}

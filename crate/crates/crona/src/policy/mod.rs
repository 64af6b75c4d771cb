//! Per-agent actors and the centralized critic. Each agent owns its
//! modality encoders, history transformer, and policy head; the critic
//! is a small MLP over every agent's history embedding and belief plus
//! a flat global-state row. Encoders and transformer are shared
//! between the actor path and the critic's inputs, so the critic adds
//! only its own head parameters.

pub mod encoders;
pub mod history;

pub use encoders::{pose_features, preprocess_observation, AudioEncoder, FrameInput, VisionEncoder, POSE_FEATURES};
pub use history::{CachedStep, HistoryCache, HistoryEncoder};

use crate::belief::{Belief, BeliefNet, BeliefNetConfig};
use crate::env::{Action, AgentModalities, NavEnv, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scene::NUM_CATEGORIES;
use crate::tensor::{ParamGroup, ParamStore, Tape, Tensor, VarId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct PolicyConfig {
    /// Width each modality feature is projected to.
    pub embedding_size: usize,
    /// Hidden width of the post-flatten projection in both encoders.
    pub encoder_hidden: usize,
    /// Square edge the spectrogram is resampled to.
    pub audio_input_hw: usize,
    /// Channel widths of the first two audio conv layers.
    pub audio_channels: (usize, usize),
    /// Square edge the depth image is resampled to.
    pub vision_input_hw: usize,
    pub vision_base_channels: usize,
    pub vision_blocks_per_stage: usize,
    /// Transformer hidden size; z_h width.
    pub d_h: usize,
    pub heads: usize,
    /// History cache capacity in steps.
    pub k: usize,
    pub critic_hidden: usize,
    pub n_categories: usize,
}

impl PolicyConfig {
    pub fn full() -> PolicyConfig {
        PolicyConfig {
            embedding_size: 100,
            encoder_hidden: 128,
            audio_input_hw: 48,
            audio_channels: (32, 64),
            vision_input_hw: 64,
            vision_base_channels: 16,
            vision_blocks_per_stage: 2,
            d_h: 256,
            heads: 8,
            k: 150,
            critic_hidden: 128,
            n_categories: NUM_CATEGORIES,
        }
    }

    /// Every width shrunk for single-core runs and tests.
    pub fn smoke() -> PolicyConfig {
        PolicyConfig {
            embedding_size: 16,
            encoder_hidden: 16,
            audio_input_hw: 24,
            audio_channels: (8, 16),
            vision_input_hw: 8,
            vision_base_channels: 4,
            vision_blocks_per_stage: 1,
            d_h: 32,
            heads: 4,
            k: 6,
            critic_hidden: 32,
            n_categories: NUM_CATEGORIES,
        }
    }

    pub fn belief_feature_len(&self) -> usize {
        Belief::feature_len(self.n_categories)
    }
}

/// Slot widths of a flat observation embedding:
/// [modality | pose | goal].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsLayout {
    pub modality: usize,
    pub pose: usize,
    pub goal: usize,
}

impl ObsLayout {
    pub fn total(&self) -> usize {
        self.modality + self.pose + self.goal
    }
}

/// One sampled (or greedy) action with its policy statistics.
#[derive(Debug, Clone)]
pub struct ActOutput {
    pub action: Action,
    pub log_prob: f64,
    pub entropy: f64,
    pub probs: [f64; NUM_ACTIONS],
    /// History embedding of the acting step; the critic consumes it
    /// when values are recorded during collection.
    pub z: Vec<f64>,
}

/// Draw from categorical log-probabilities; greedy takes the argmax.
/// Returns (index, log-prob of the pick, distribution entropy).
pub fn sample_categorical(log_probs: &[f64], rng: &mut impl Rng, greedy: bool) -> (usize, f64, f64) {
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    let entropy: f64 = probs
        .iter()
        .zip(log_probs)
        .map(|(p, lp)| if *p > 0.0 { -p * lp } else { 0.0 })
        .sum();
    let idx = if greedy {
        let mut best = 0;
        for i in 1..log_probs.len() {
            if log_probs[i] > log_probs[best] {
                best = i;
            }
        }
        best
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = log_probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    (idx, log_probs[idx], entropy)
}

#[derive(Debug, Clone)]
pub struct AgentPolicy {
    pub modalities: AgentModalities,
    audio_enc: Option<AudioEncoder>,
    vision_enc: Option<VisionEncoder>,
    pub history: HistoryEncoder,
    head: Linear,
    pub cfg: PolicyConfig,
}

impl AgentPolicy {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: PolicyConfig,
        modalities: AgentModalities,
    ) -> Result<AgentPolicy> {
        if !modalities.depth && !modalities.audio {
            return Err(Error::config(format!("{name}: agent declares no modality")));
        }
        let group = ParamGroup::Actor;
        let vision_enc = modalities
            .depth
            .then(|| VisionEncoder::new(store, rng, group, &format!("{name}/vision"), &cfg));
        let audio_enc = modalities
            .audio
            .then(|| AudioEncoder::new(store, rng, group, &format!("{name}/audio"), &cfg));
        let mod_len = Self::modality_len(&cfg, modalities);
        let history = HistoryEncoder::new(
            store,
            rng,
            group,
            &format!("{name}/history"),
            mod_len + cfg.n_categories,
            cfg.d_h,
            cfg.heads,
            cfg.k,
        );
        let head = Linear::new(
            store,
            rng,
            group,
            &format!("{name}/head"),
            cfg.d_h + cfg.belief_feature_len(),
            NUM_ACTIONS,
            0.01,
        );
        Ok(AgentPolicy { modalities, audio_enc, vision_enc, history, head, cfg })
    }

    fn modality_len(cfg: &PolicyConfig, m: AgentModalities) -> usize {
        let mut n = 0;
        if m.depth {
            n += cfg.embedding_size;
        }
        if m.audio {
            n += cfg.embedding_size;
        }
        n
    }

    pub fn obs_layout(&self) -> ObsLayout {
        ObsLayout {
            modality: Self::modality_len(&self.cfg, self.modalities),
            pose: POSE_FEATURES,
            goal: self.cfg.n_categories,
        }
    }

    /// Batch the conv encoders over whole-rollout inputs and append
    /// the goal rows: [T, modality + n_categories]. Gradient flows to
    /// encoder parameters; the inputs are constants.
    pub fn embed_frames(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[FrameInput],
    ) -> Result<VarId> {
        let t_len = frames.len();
        if t_len == 0 {
            return Err(Error::invalid("embed_frames on empty frame list"));
        }
        let mut parts = Vec::new();
        if let Some(enc) = &self.vision_enc {
            let v = self.cfg.vision_input_hw;
            let mut data = Vec::with_capacity(t_len * v * v);
            for f in frames {
                let d = f
                    .depth
                    .as_ref()
                    .ok_or_else(|| Error::invalid("depth frame missing for vision agent"))?;
                data.extend_from_slice(d);
            }
            let x = tape.leaf(Tensor::new(vec![t_len, 1, v, v], data)?);
            parts.push(enc.forward(tape, store, x));
        }
        if let Some(enc) = &self.audio_enc {
            let s = self.cfg.audio_input_hw;
            let mut data = Vec::with_capacity(t_len * 2 * s * s);
            for f in frames {
                let a = f
                    .audio
                    .as_ref()
                    .ok_or_else(|| Error::invalid("audio frame missing for audio agent"))?;
                data.extend_from_slice(a);
            }
            let x = tape.leaf(Tensor::new(vec![t_len, 2, s, s], data)?);
            parts.push(enc.forward(tape, store, x));
        }
        let mut goal = Vec::with_capacity(t_len * self.cfg.n_categories);
        for f in frames {
            if f.goal.len() != self.cfg.n_categories {
                return Err(Error::shape(format!(
                    "goal vector length {} vs {} categories",
                    f.goal.len(),
                    self.cfg.n_categories
                )));
            }
            goal.extend_from_slice(&f.goal);
        }
        parts.push(tape.leaf(Tensor::matrix(t_len, self.cfg.n_categories, goal)?));
        Ok(tape.concat_cols(&parts))
    }

    /// Fuse whole-rollout rows into history tokens, [T, d_h].
    pub fn fuse_frames(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mod_goal: VarId,
        frames: &[FrameInput],
    ) -> Result<VarId> {
        self.fuse_frames_with_context(tape, store, mod_goal, frames, &[])
    }

    /// As `fuse_frames`, but with constant context rows prepended. The
    /// context holds cached steps from before a rollout truncation;
    /// their modality features were computed at collection time and do
    /// not receive gradient. Returns [ctx + T, d_h].
    pub fn fuse_frames_with_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mod_goal: VarId,
        frames: &[FrameInput],
        ctx: &[CachedStep],
    ) -> Result<VarId> {
        let t_len = frames.len();
        let total = ctx.len() + t_len;
        let d = self.history.d_mod_goal;
        let mg = if ctx.is_empty() {
            mod_goal
        } else {
            let mut data = Vec::with_capacity(ctx.len() * d);
            for step in ctx {
                if step.mod_goal.len() != d {
                    return Err(Error::shape(format!(
                        "context row length {} vs {d}",
                        step.mod_goal.len()
                    )));
                }
                data.extend_from_slice(&step.mod_goal);
            }
            let head = tape.leaf(Tensor::matrix(ctx.len(), d, data)?);
            let a = tape.reshape(head, &[ctx.len() * d]);
            let b = tape.reshape(mod_goal, &[t_len * d]);
            let flat = tape.concat_vec(&[a, b]);
            tape.reshape(flat, &[total, d])
        };
        let mut pose = Vec::with_capacity(total * POSE_FEATURES);
        let mut act = Vec::with_capacity(total * NUM_ACTIONS);
        for step in ctx {
            pose.extend_from_slice(&step.pose);
            act.extend_from_slice(&step.prev_action);
        }
        for f in frames {
            pose.extend_from_slice(&f.pose);
            act.extend_from_slice(&f.prev_action);
        }
        let pose = tape.leaf(Tensor::matrix(total, POSE_FEATURES, pose)?);
        let act = tape.leaf(Tensor::matrix(total, NUM_ACTIONS, act)?);
        Ok(self.history.fuse(tape, store, mg, pose, act))
    }

    /// z_h for every step of a fused episode sequence: step t attends
    /// over steps max(0, t-k)..=t. Returns [T, d_h].
    pub fn z_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: VarId,
        t_len: usize,
    ) -> VarId {
        self.z_sequence_range(tape, store, fused, t_len, 0)
    }

    /// As `z_sequence` but emits rows only for steps `emit_from..`,
    /// still attending over the earlier rows. Episode fragments that
    /// carry history from a previous rollout prepend those steps and
    /// emit from the fragment start.
    pub fn z_sequence_range(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: VarId,
        t_len: usize,
        emit_from: usize,
    ) -> VarId {
        assert!(emit_from < t_len, "empty emission range");
        let w = self.history.window_len();
        let mut rows = Vec::with_capacity(t_len - emit_from);
        for t in emit_from..t_len {
            let mut idx = Vec::with_capacity(w);
            for s in 0..w {
                // Window slot s corresponds to step t - (w-1) + s;
                // out-of-range slots are zeroed inside window().
                let j = t as isize - (w as isize - 1) + s as isize;
                idx.push(j.max(0) as usize);
            }
            let tokens = tape.select_rows(fused, &idx);
            let n_valid = (t + 1).min(w);
            let z = self.history.window(tape, store, tokens, n_valid);
            rows.push(z);
        }
        tape.stack_rows(&rows)
    }

    /// Policy logits over (z_h concatenated with the belief feature).
    pub fn head_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: VarId,
        beliefs: VarId,
    ) -> VarId {
        let x = tape.concat_cols(&[z, beliefs]);
        self.head.forward(tape, store, x)
    }

    /// Modality feature values for one frame, on a throwaway tape.
    pub fn modality_values(&self, store: &ParamStore, frame: &FrameInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mg = self.embed_frames(&mut tape, store, std::slice::from_ref(frame))?;
        let v = tape.value(mg);
        Ok(v.data[..self.obs_layout().modality].to_vec())
    }

    /// Flat observation embedding [modality | pose | goal]; the
    /// concatenation the history cache conceptually stores.
    pub fn encode_observation(&self, store: &ParamStore, frame: &FrameInput) -> Result<Vec<f64>> {
        let layout = self.obs_layout();
        let mut out = Vec::with_capacity(layout.total());
        out.extend(self.modality_values(store, frame)?);
        out.extend_from_slice(&frame.pose);
        out.extend_from_slice(&frame.goal);
        Ok(out)
    }

    /// Decentralized execution: one action from the local cache, the
    /// current frame, and the local belief. Pushes the current step
    /// into the cache before returning.
    pub fn act(
        &self,
        store: &ParamStore,
        cache: &mut HistoryCache,
        frame: &FrameInput,
        belief: &[f64],
        rng: &mut impl Rng,
        greedy: bool,
    ) -> Result<ActOutput> {
        if belief.len() != self.cfg.belief_feature_len() {
            return Err(Error::shape(format!(
                "belief feature length {} vs {}",
                belief.len(),
                self.cfg.belief_feature_len()
            )));
        }
        if cache.capacity() != self.cfg.k {
            return Err(Error::config(format!(
                "cache capacity {} vs configured k {}",
                cache.capacity(),
                self.cfg.k
            )));
        }
        let current = self.current_step(store, frame)?;
        let (mut tape, z) = self.window_graph(store, cache, &current)?;
        let z_values = tape.value(z).data.clone();
        let b = tape.leaf(Tensor::matrix(1, belief.len(), belief.to_vec())?);
        let logits = self.head_logits(&mut tape, store, z, b);
        let logp = tape.log_softmax(logits);
        let lp = tape.value(logp).data.clone();

        cache.push(current);

        let (idx, log_prob, entropy) = sample_categorical(&lp, rng, greedy);
        let mut probs = [0.0; NUM_ACTIONS];
        for (p, l) in probs.iter_mut().zip(&lp) {
            *p = l.exp();
        }
        let action = Action::from_index(idx)
            .ok_or_else(|| Error::invalid(format!("sampled action index {idx}")))?;
        Ok(ActOutput { action, log_prob, entropy, probs, z: z_values })
    }

    /// History embedding for (cache, frame) without touching the
    /// cache; used to bootstrap truncated rollouts.
    pub fn peek_z(
        &self,
        store: &ParamStore,
        cache: &HistoryCache,
        frame: &FrameInput,
    ) -> Result<Vec<f64>> {
        let current = self.current_step(store, frame)?;
        let (tape, z) = self.window_graph(store, cache, &current)?;
        Ok(tape.value(z).data.clone())
    }

    fn current_step(&self, store: &ParamStore, frame: &FrameInput) -> Result<CachedStep> {
        let mut mod_goal = self.modality_values(store, frame)?;
        mod_goal.extend_from_slice(&frame.goal);
        Ok(CachedStep { mod_goal, pose: frame.pose, prev_action: frame.prev_action })
    }

    /// Leaf-window z for the current step on a fresh tape.
    fn window_graph(
        &self,
        store: &ParamStore,
        cache: &HistoryCache,
        current: &CachedStep,
    ) -> Result<(Tape, VarId)> {
        if cache.capacity() != self.cfg.k {
            return Err(Error::config(format!(
                "cache capacity {} vs configured k {}",
                cache.capacity(),
                self.cfg.k
            )));
        }
        let w = self.history.window_len();
        let mg_len = self.history.d_mod_goal;
        let n_valid = (cache.len() + 1).min(w);
        let mut mg = vec![0.0; w * mg_len];
        let mut pose = vec![0.0; w * POSE_FEATURES];
        let mut act = vec![0.0; w * NUM_ACTIONS];
        let fill = |slot: usize,
                    step: &CachedStep,
                    mg: &mut Vec<f64>,
                    pose: &mut Vec<f64>,
                    act: &mut Vec<f64>| {
            mg[slot * mg_len..(slot + 1) * mg_len].copy_from_slice(&step.mod_goal);
            pose[slot * POSE_FEATURES..(slot + 1) * POSE_FEATURES].copy_from_slice(&step.pose);
            act[slot * NUM_ACTIONS..(slot + 1) * NUM_ACTIONS].copy_from_slice(&step.prev_action);
        };
        // Oldest cached step lands at slot w - n_valid, current at w-1.
        for (i, step) in cache.iter().skip(cache.len() + 1 - n_valid).enumerate() {
            fill(w - n_valid + i, step, &mut mg, &mut pose, &mut act);
        }
        fill(w - 1, current, &mut mg, &mut pose, &mut act);

        let mut tape = Tape::new();
        let mg = tape.leaf(Tensor::matrix(w, mg_len, mg)?);
        let pose = tape.leaf(Tensor::matrix(w, POSE_FEATURES, pose)?);
        let act = tape.leaf(Tensor::matrix(w, NUM_ACTIONS, act)?);
        let fused = self.history.fuse(&mut tape, store, mg, pose, act);
        let z = self.history.window(&mut tape, store, fused, n_valid);
        Ok((tape, z))
    }
}

/// Centralized critic head. Inputs per step: every agent's z_h, every
/// agent's belief feature, and the global state row. The trainer
/// weights this branch of the loss so each shared encoder stack
/// receives the value gradient divided by the agent count.
#[derive(Debug, Clone)]
pub struct Critic {
    l1: Linear,
    l2: Linear,
    pub n_agents: usize,
    pub d_h: usize,
    pub belief_len: usize,
    pub state_len: usize,
}

impl Critic {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_agents: usize,
        d_h: usize,
        belief_len: usize,
        state_len: usize,
        hidden: usize,
    ) -> Critic {
        let d_in = n_agents * (d_h + belief_len) + state_len;
        let group = ParamGroup::Critic;
        Critic {
            l1: Linear::new(store, rng, group, "critic/l1", d_in, hidden, 2.0_f64.sqrt()),
            l2: Linear::new(store, rng, group, "critic/l2", hidden, 1, 0.01),
            n_agents,
            d_h,
            belief_len,
            state_len,
        }
    }

    /// z: per-agent [T, d_h]; beliefs: [T, n*belief_len]; state:
    /// [T, state_len]. Returns [T, 1].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &[VarId],
        beliefs: VarId,
        state: VarId,
    ) -> Result<VarId> {
        if z.len() != self.n_agents {
            return Err(Error::invalid(format!(
                "critic got {} history embeddings for {} agents",
                z.len(),
                self.n_agents
            )));
        }
        let mut parts: Vec<VarId> = z.to_vec();
        parts.push(beliefs);
        parts.push(state);
        let x = tape.concat_cols(&parts);
        let h = self.l1.forward(tape, store, x);
        let h = tape.relu(h);
        Ok(self.l2.forward(tape, store, h))
    }

    /// Single-step convenience: plain value from flat rows.
    pub fn value(
        &self,
        store: &ParamStore,
        z_rows: &[Vec<f64>],
        beliefs: &[f64],
        state: &[f64],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let z: Vec<VarId> = z_rows
            .iter()
            .map(|r| -> Result<VarId> {
                Ok(tape.leaf(Tensor::matrix(1, self.d_h, r.clone())?))
            })
            .collect::<Result<_>>()?;
        let b = tape.leaf(Tensor::matrix(1, beliefs.len(), beliefs.to_vec())?);
        let s = tape.leaf(Tensor::matrix(1, state.len(), state.to_vec())?);
        let v = self.forward(&mut tape, store, &z, b, s)?;
        Ok(tape.value(v).item())
    }
}

/// Shape of the critic's global-state row for a fixed episode setup.
#[derive(Debug, Clone, Copy)]
pub struct StateSpec {
    pub n_targets: usize,
    pub n_agents: usize,
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub n_categories: usize,
}

impl StateSpec {
    pub fn for_env(env: &NavEnv) -> StateSpec {
        StateSpec {
            n_targets: env.n_targets(),
            n_agents: env.n_agents(),
            width: env.scene().width,
            height: env.scene().height,
            horizon: env.horizon(),
            n_categories: NUM_CATEGORIES,
        }
    }

    /// Per target: normalized x, y, category one-hot, found flag.
    /// Per agent: normalized x, y, heading cos, sin. Plus t/H.
    pub fn len(&self) -> usize {
        self.n_targets * (3 + self.n_categories) + self.n_agents * 4 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Flat global-state row for the critic; coordinates normalized by the
/// scene bounding box.
pub fn state_feature(env: &NavEnv) -> Vec<f64> {
    let spec = StateSpec::for_env(env);
    let wd = (spec.width.saturating_sub(1)).max(1) as f64;
    let hd = (spec.height.saturating_sub(1)).max(1) as f64;
    let mut v = Vec::with_capacity(spec.len());
    let scene = env.scene();
    for (j, &ti) in env.spec().targets.iter().enumerate() {
        let t = &scene.targets[ti];
        v.push(t.cell.0 as f64 / wd);
        v.push(t.cell.1 as f64 / hd);
        let mut onehot = vec![0.0; spec.n_categories];
        onehot[t.category.index()] = 1.0;
        v.extend(onehot);
        v.push(if env.found()[j] { 1.0 } else { 0.0 });
    }
    for pose in env.poses() {
        v.push(pose.x / wd);
        v.push(pose.y / hd);
        v.push(pose.heading.cos());
        v.push(pose.heading.sin());
    }
    v.push(env.t() as f64 / env.horizon().max(1) as f64);
    debug_assert_eq!(v.len(), spec.len());
    v
}

/// Everything trainable for one episode setup: per-agent actors,
/// per-audio-agent belief predictors, one critic, one store.
pub struct PolicySet {
    pub store: ParamStore,
    pub agents: Vec<AgentPolicy>,
    pub beliefs: Vec<Option<BeliefNet>>,
    pub critic: Critic,
    pub cfg: PolicyConfig,
}

impl PolicySet {
    pub fn new(
        cfg: PolicyConfig,
        belief_cfg: BeliefNetConfig,
        modalities: &[AgentModalities],
        state_len: usize,
        seed: u64,
    ) -> Result<PolicySet> {
        if modalities.is_empty() {
            return Err(Error::config("policy set needs at least one agent"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agents = Vec::with_capacity(modalities.len());
        let mut beliefs = Vec::with_capacity(modalities.len());
        for (i, &m) in modalities.iter().enumerate() {
            agents.push(AgentPolicy::new(&mut store, &mut rng, &format!("agent{i}"), cfg, m)?);
            beliefs.push(m.audio.then(|| {
                BeliefNet::new(&mut store, &mut rng, ParamGroup::Actor, &format!("agent{i}/belief"), belief_cfg)
            }));
        }
        let critic = Critic::new(
            &mut store,
            &mut rng,
            modalities.len(),
            cfg.d_h,
            cfg.belief_feature_len(),
            state_len,
            cfg.critic_hidden,
        );
        Ok(PolicySet { store, agents, beliefs, critic, cfg })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Zero belief rows for vision-only agents keep head shapes
    /// uniform across modality configurations.
    pub fn zero_belief(&self) -> Vec<f64> {
        vec![0.0; self.cfg.belief_feature_len()]
    }
}

#[cfg(test)]
mod tests;

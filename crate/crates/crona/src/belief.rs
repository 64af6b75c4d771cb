//! Auxiliary belief over the sound sources: a conv net over the
//! binaural spectrogram predicts an instantaneous goal location and
//! per-category presence probabilities; an EMA smooths those into the
//! per-agent belief carried through the episode.

use crate::error::{Error, Result};
use crate::nn::{ConvTrunk, ConvTrunkConfig, Linear};
use crate::scene::{geodesic, DistanceField, Pose, Scene, Target, NUM_CATEGORIES};
use crate::sensors::Spectrogram;
use crate::tensor::{ParamGroup, ParamStore, Tape, Tensor, VarId};
use rand::Rng;

pub const BCE_CLAMP: f64 = 1e-7;
pub const DEFAULT_EMA_ALPHA: f64 = 0.5;

/// Instantaneous output of the predictor for one agent at one step.
#[derive(Debug, Clone)]
pub struct BeliefPrediction {
    /// Goal estimate in world coordinates, meters.
    pub goal_global: (f64, f64),
    /// Same point rotated into the agent frame.
    pub loc_relative: (f64, f64),
    /// Per-category presence probability, clamped into (0, 1).
    pub cat_probs: Vec<f64>,
}

/// Smoothed per-agent belief state; episode-scoped.
#[derive(Debug, Clone)]
pub struct Belief {
    pub loc: (f64, f64),
    pub cat: Vec<f64>,
    pub initialized: bool,
}

impl Belief {
    pub fn empty(n_categories: usize) -> Belief {
        Belief {
            loc: (0.0, 0.0),
            cat: vec![0.0; n_categories],
            initialized: false,
        }
    }

    /// Flat feature row the policy and critic consume: relative
    /// location then category probabilities.
    pub fn feature(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.cat.len());
        v.push(self.loc.0);
        v.push(self.loc.1);
        v.extend_from_slice(&self.cat);
        v
    }

    pub fn feature_len(n_categories: usize) -> usize {
        2 + n_categories
    }
}

/// Training labels for one agent at one step.
#[derive(Debug, Clone)]
pub struct BeliefSupervision {
    /// Location of the nearest unfound target, world frame.
    pub goal_star: (f64, f64),
    /// Multi-hot over categories of the still-sounding targets.
    pub cat_star: Vec<f64>,
}

/// Nearest-target metric used when building supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalMetric {
    Geodesic,
    Euclidean,
}

/// Rotate a world-frame goal into the agent frame: subtract the agent
/// position, then apply [[cos t, sin t], [-sin t, cos t]].
pub fn to_agent_frame(goal_global: (f64, f64), pose: &Pose) -> (f64, f64) {
    let dx = goal_global.0 - pose.x;
    let dy = goal_global.1 - pose.y;
    let (s, c) = pose.heading.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

/// EMA step. The first update copies the prediction through so the
/// belief never mixes with an arbitrary initial value.
pub fn ema_update(belief: &mut Belief, pred: &BeliefPrediction, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    if belief.cat.len() != pred.cat_probs.len() {
        return Err(Error::shape(format!(
            "belief has {} categories, prediction {}",
            belief.cat.len(),
            pred.cat_probs.len()
        )));
    }
    if !belief.initialized {
        belief.loc = pred.loc_relative;
        belief.cat = pred.cat_probs.clone();
        belief.initialized = true;
        return Ok(());
    }
    belief.loc.0 = alpha * pred.loc_relative.0 + (1.0 - alpha) * belief.loc.0;
    belief.loc.1 = alpha * pred.loc_relative.1 + (1.0 - alpha) * belief.loc.1;
    for (b, p) in belief.cat.iter_mut().zip(&pred.cat_probs) {
        *b = alpha * p + (1.0 - alpha) * *b;
    }
    Ok(())
}

/// Supervision for one agent: nearest unfound target by the chosen
/// metric plus the multi-hot label over unfound-target categories.
/// `fields` holds one distance field per episode target, in target
/// order. Returns None when everything is found.
pub fn supervision_for(
    scene: &Scene,
    targets: &[Target],
    found: &[bool],
    fields: &[DistanceField],
    pose: &Pose,
    metric: GoalMetric,
) -> Option<BeliefSupervision> {
    let cell = pose.cell();
    let mut best: Option<(f64, usize)> = None;
    let mut cat_star = vec![0.0; NUM_CATEGORIES];
    for (i, tgt) in targets.iter().enumerate() {
        if found[i] {
            continue;
        }
        cat_star[tgt.category.index()] = 1.0;
        let d = match metric {
            // Unreachable targets never win the argmin.
            GoalMetric::Geodesic => fields[i].get(cell).unwrap_or(f64::INFINITY),
            GoalMetric::Euclidean => {
                let dx = tgt.cell.0 as f64 - pose.x;
                let dy = tgt.cell.1 as f64 - pose.y;
                (dx * dx + dy * dy).sqrt()
            }
        };
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    let (_, idx) = best?;
    let _ = scene;
    Some(BeliefSupervision {
        goal_star: (targets[idx].cell.0 as f64, targets[idx].cell.1 as f64),
        cat_star,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BeliefNetConfig {
    /// Square edge the spectrogram is resampled to before the trunk.
    pub input_hw: usize,
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub head_hidden: usize,
    pub n_categories: usize,
}

impl BeliefNetConfig {
    pub fn full() -> BeliefNetConfig {
        BeliefNetConfig {
            input_hw: 48,
            base_channels: 16,
            blocks_per_stage: 2,
            head_hidden: 128,
            n_categories: NUM_CATEGORIES,
        }
    }

    pub fn smoke() -> BeliefNetConfig {
        BeliefNetConfig {
            input_hw: 8,
            base_channels: 4,
            blocks_per_stage: 1,
            head_hidden: 16,
            n_categories: NUM_CATEGORIES,
        }
    }

    fn trunk(&self) -> ConvTrunkConfig {
        ConvTrunkConfig {
            in_channels: 2,
            input_hw: self.input_hw,
            base_channels: self.base_channels,
            blocks_per_stage: self.blocks_per_stage,
        }
    }
}

/// Conv trunk over the two spectrogram channels with a linear goal
/// head and a two-layer category head.
#[derive(Debug, Clone)]
pub struct BeliefNet {
    trunk: ConvTrunk,
    goal_head: Linear,
    cat_hidden: Linear,
    cat_head: Linear,
    pub cfg: BeliefNetConfig,
}

/// Tape outputs of one predictor forward pass, kept alive for the loss.
pub struct BeliefForward {
    /// [N, 2] world-frame goal estimates.
    pub goal: VarId,
    /// [N, |C|] category logits (pre-sigmoid).
    pub cat_logits: VarId,
}

impl BeliefNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        cfg: BeliefNetConfig,
    ) -> BeliefNet {
        let trunk = ConvTrunk::new(store, rng, group, &format!("{name}/trunk"), cfg.trunk());
        let d = trunk.cfg.out_dim();
        BeliefNet {
            goal_head: Linear::new(store, rng, group, &format!("{name}/goal"), d, 2, 0.01),
            cat_hidden: Linear::new(
                store, rng, group, &format!("{name}/cat1"), d, cfg.head_hidden, 2.0_f64.sqrt(),
            ),
            cat_head: Linear::new(
                store, rng, group, &format!("{name}/cat2"), cfg.head_hidden, cfg.n_categories, 0.01,
            ),
            trunk,
            cfg,
        }
    }

    /// Spectrogram resampled to the trunk's square input, [2, S, S].
    pub fn preprocess(&self, spec: &Spectrogram) -> Vec<f64> {
        spec.resampled(self.cfg.input_hw)
    }

    /// x: [N, 2, S, S] preprocessed spectrograms.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> BeliefForward {
        let feat = self.trunk.forward(tape, store, x);
        let goal = self.goal_head.forward(tape, store, feat);
        let h = self.cat_hidden.forward(tape, store, feat);
        let h = tape.relu(h);
        let cat_logits = self.cat_head.forward(tape, store, h);
        BeliefForward { goal, cat_logits }
    }

    /// Single-observation inference path used during rollouts.
    pub fn predict(
        &self,
        store: &ParamStore,
        spec: &Spectrogram,
        pose: &Pose,
    ) -> Result<BeliefPrediction> {
        let s = self.cfg.input_hw;
        let data = self.preprocess(spec);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, s, s], data)?);
        let out = self.forward(&mut tape, store, x);
        let goal = tape.value(out.goal);
        let logits = tape.value(out.cat_logits);
        let goal_global = (goal.data[0], goal.data[1]);
        let cat_probs = logits
            .data
            .iter()
            .map(|&z| sigmoid(z).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))
            .collect();
        Ok(BeliefPrediction {
            goal_global,
            loc_relative: to_agent_frame(goal_global, pose),
            cat_probs,
        })
    }

    /// Squared goal error plus summed binary cross-entropy, averaged
    /// over the batch. goal_star: [N, 2], cat_star: [N, |C|].
    pub fn loss(
        &self,
        tape: &mut Tape,
        fwd: &BeliefForward,
        goal_star: &Tensor,
        cat_star: &Tensor,
    ) -> VarId {
        let n = goal_star.shape[0] as f64;
        let tgt = tape.leaf(goal_star.clone());
        let diff = tape.sub(fwd.goal, tgt);
        let sq = tape.mul(diff, diff);
        let goal_loss = tape.sum(sq);

        // BCE on sigmoid probabilities with clamped logs:
        //   -y.ln p - (1-y).ln(1-p)
        let p = tape.sigmoid(fwd.cat_logits);
        let p = tape.clamp_scalar(p, BCE_CLAMP, 1.0 - BCE_CLAMP);
        let y = tape.leaf(cat_star.clone());
        let ln_p = tape.ln(p);
        let pos = tape.mul(y, ln_p);
        let one = tape.leaf(Tensor::full(&cat_star.shape, 1.0));
        let not_y = tape.sub(one, y);
        let not_p = tape.sub(one, p);
        let ln_np = tape.ln(not_p);
        let neg = tape.mul(not_y, ln_np);
        let bce_terms = tape.add(pos, neg);
        let bce = tape.sum(bce_terms);
        let bce = tape.neg(bce);

        let total = tape.add(goal_loss, bce);
        tape.scale(total, 1.0 / n)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scalar-side loss evaluation, shared with tests and the replay
/// diagnostics: same formula as `BeliefNet::loss` for one sample.
pub fn belief_loss_scalar(pred: &BeliefPrediction, sup: &BeliefSupervision) -> f64 {
    let dx = pred.goal_global.0 - sup.goal_star.0;
    let dy = pred.goal_global.1 - sup.goal_star.1;
    let mut loss = dx * dx + dy * dy;
    for (p, y) in pred.cat_probs.iter().zip(&sup.cat_star) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    loss
}

/// Convenience wrapper: geodesic distance from a pose to a cell.
pub fn pose_to_cell_distance(scene: &Scene, pose: &Pose, cell: (usize, usize)) -> Option<f64> {
    geodesic(scene, pose.cell(), cell)
}

//! Fixed-size observation-action history and the transformer that
//! turns a left-padded window of fused tokens into z_h.
//!
//! The same `window` path runs during rollouts (token rows are leaf
//! constants) and inside the update graph (token rows are selected out
//! of the per-rollout embedding matrix), so execution and training see
//! bit-identical computation.

use crate::env::NUM_ACTIONS;
use crate::nn::{causal_pad_mask, pad_mask, sinusoidal_positions, DecoderLayer, EncoderLayer, Linear};
use crate::tensor::{ParamGroup, ParamStore, Tape, Tensor, VarId};
use rand::Rng;

use super::encoders::POSE_FEATURES;

/// One cached step: the modality+goal features as computed at
/// observation time, plus the raw pose row and previous-action one-hot.
#[derive(Debug, Clone)]
pub struct CachedStep {
    pub mod_goal: Vec<f64>,
    pub pose: [f64; POSE_FEATURES],
    pub prev_action: [f64; NUM_ACTIONS],
}

/// Ring buffer of the last k steps, oldest first.
#[derive(Debug, Clone)]
pub struct HistoryCache {
    slots: std::collections::VecDeque<CachedStep>,
    k: usize,
}

impl HistoryCache {
    pub fn new(k: usize) -> HistoryCache {
        HistoryCache { slots: std::collections::VecDeque::with_capacity(k + 1), k }
    }

    pub fn push(&mut self, step: CachedStep) {
        self.slots.push_back(step);
        while self.slots.len() > self.k {
            self.slots.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn iter(&self) -> impl Iterator<Item = &CachedStep> {
        self.slots.iter()
    }
}

#[derive(Debug, Clone)]
pub struct HistoryEncoder {
    act_enc: Linear,
    pose_enc: Linear,
    fuse1: Linear,
    fuse2: Linear,
    enc: EncoderLayer,
    dec: DecoderLayer,
    /// [k+1, d_h] sinusoidal table over window slots.
    pos: Tensor,
    pub k: usize,
    pub d_h: usize,
    /// Width of the modality+goal block feeding fusion.
    pub d_mod_goal: usize,
}

impl HistoryEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        d_mod_goal: usize,
        d_h: usize,
        heads: usize,
        k: usize,
    ) -> HistoryEncoder {
        let gain = 2.0_f64.sqrt();
        let d_in = d_mod_goal + 16 + 16;
        HistoryEncoder {
            act_enc: Linear::new(store, rng, group, &format!("{name}/act"), NUM_ACTIONS, 16, gain),
            pose_enc: Linear::new(store, rng, group, &format!("{name}/pose"), POSE_FEATURES, 16, gain),
            fuse1: Linear::new(store, rng, group, &format!("{name}/fuse1"), d_in, d_h, gain),
            fuse2: Linear::new(store, rng, group, &format!("{name}/fuse2"), d_h, d_h, 1.0),
            enc: EncoderLayer::new(store, rng, group, &format!("{name}/enc"), d_h, heads, d_h),
            dec: DecoderLayer::new(store, rng, group, &format!("{name}/dec"), d_h, heads, d_h),
            pos: sinusoidal_positions(k + 1, d_h),
            k,
            d_h,
            d_mod_goal,
        }
    }

    pub fn window_len(&self) -> usize {
        self.k + 1
    }

    /// Fuse aligned rows into tokens: mod_goal [T, mg], pose [T, 5],
    /// prev_action [T, 4] -> [T, d_h].
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mod_goal: VarId,
        pose: VarId,
        prev_action: VarId,
    ) -> VarId {
        let p = self.pose_enc.forward(tape, store, pose);
        let a = self.act_enc.forward(tape, store, prev_action);
        let x = tape.concat_cols(&[mod_goal, p, a]);
        let x = self.fuse1.forward(tape, store, x);
        let x = tape.relu(x);
        self.fuse2.forward(tape, store, x)
    }

    /// tokens: [k+1, d_h], slots oldest to newest, the current step
    /// last. Slots before `k+1 - n_valid` are zeroed and masked out.
    /// Returns z_h as [1, d_h].
    pub fn window(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: VarId,
        n_valid: usize,
    ) -> VarId {
        let w = self.window_len();
        assert_eq!(tape.shape(tokens), &[w, self.d_h], "window token shape");
        assert!(n_valid >= 1 && n_valid <= w, "n_valid {n_valid} outside 1..={w}");
        let valid_from = w - n_valid;

        // Zero padded rows so window content is independent of
        // whatever the selection put there.
        let mut mask = vec![1.0; w * self.d_h];
        mask[..valid_from * self.d_h].fill(0.0);
        let mask = tape.leaf(Tensor { shape: vec![w, self.d_h], data: mask });
        let t = tape.mul(tokens, mask);
        let t = tape.add_const(t, &self.pos);

        let key_mask = pad_mask(w, valid_from);
        let e = self.enc.forward(tape, store, t, &key_mask);
        let d = self.dec.forward(
            tape,
            store,
            t,
            e,
            &causal_pad_mask(w, valid_from),
            &key_mask,
        );
        tape.select_rows(d, &[w - 1])
    }
}

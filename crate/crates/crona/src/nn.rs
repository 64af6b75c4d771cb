//! Layer builders over the tape: parameter registration plus a
//! forward method. Shapes are fixed at construction, so a mismatch at
//! forward time is a bug, not an input error.

use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, VarId};
use crate::tensor::kernels::ConvDims;
use rand::Rng;

pub const NORM_EPS: f64 = 1e-5;
/// Additive score mask for disallowed attention slots.
pub const MASK_OFF: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
    ) -> Linear {
        let w = store.add(
            format!("{name}/w"),
            group,
            crate::tensor::orthogonal(in_dim, out_dim, gain, rng),
        );
        let b = store.add(format!("{name}/b"), group, Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Conv2d {
        let w = store.add(
            format!("{name}/w"),
            group,
            crate::tensor::orthogonal(c_out, c_in * k * k, gain, rng),
        );
        let b = store.add(format!("{name}/b"), group, Tensor::zeros(&[c_out]));
        Conv2d { w, b, c_in, c_out, k, stride, pad }
    }

    pub fn dims(&self, h: usize, w: usize) -> ConvDims {
        ConvDims {
            c_in: self.c_in,
            h,
            w,
            c_out: self.c_out,
            kh: self.k,
            kw: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// x: [N, c_in, h, w] (or unbatched); returns output and its
    /// spatial size.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        h: usize,
        w: usize,
    ) -> (VarId, usize, usize) {
        let dims = self.dims(h, w);
        let (oh, ow) = (dims.out_h(), dims.out_w());
        let wv = tape.param(store, self.w);
        let bv = tape.param(store, self.b);
        (tape.conv2d(x, wv, Some(bv), dims), oh, ow)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> GroupNorm {
        assert!(channels % groups == 0, "{name}: channels {channels} vs groups {groups}");
        let gamma = store.add(format!("{name}/gamma"), group, Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}/beta"), group, Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups }
    }

    /// Per-token layer normalization is this with groups = 1 on [T, d].
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, g, b, self.groups, NORM_EPS)
    }
}

/// Basic residual block: two 3x3 convs with group norm, ReLU between,
/// a projection shortcut when shape changes, ReLU after the sum.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

/// Group-norm group count for a channel width: 8 channels per group,
/// minimum one group.
fn norm_groups(channels: usize) -> usize {
    let mut g = (channels / 8).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> ResBlock {
        let gain = 2.0_f64.sqrt();
        let conv1 = Conv2d::new(store, rng, group, &format!("{name}/conv1"), c_in, c_out, 3, stride, 1, gain);
        let gn1 = GroupNorm::new(store, group, &format!("{name}/gn1"), c_out, norm_groups(c_out));
        let conv2 = Conv2d::new(store, rng, group, &format!("{name}/conv2"), c_out, c_out, 3, 1, 1, gain);
        let gn2 = GroupNorm::new(store, group, &format!("{name}/gn2"), c_out, norm_groups(c_out));
        let shortcut = if c_in != c_out || stride != 1 {
            let c = Conv2d::new(store, rng, group, &format!("{name}/proj"), c_in, c_out, 1, stride, 0, 1.0);
            let n = GroupNorm::new(store, group, &format!("{name}/projn"), c_out, norm_groups(c_out));
            Some((c, n))
        } else {
            None
        };
        ResBlock { conv1, gn1, conv2, gn2, shortcut }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        h: usize,
        w: usize,
    ) -> (VarId, usize, usize) {
        let (y, oh, ow) = self.conv1.forward(tape, store, x, h, w);
        let y = self.gn1.forward(tape, store, y);
        let y = tape.relu(y);
        let (y, oh, ow) = self.conv2.forward(tape, store, y, oh, ow);
        let y = self.gn2.forward(tape, store, y);
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let (s, _, _) = conv.forward(tape, store, x, h, w);
                norm.forward(tape, store, s)
            }
            None => x,
        };
        let out = tape.add(y, skip);
        (tape.relu(out), oh, ow)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        d: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert!(d % heads == 0, "{name}: d {d} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(store, rng, group, &format!("{name}/q"), d, d, 1.0),
            wk: Linear::new(store, rng, group, &format!("{name}/k"), d, d, 1.0),
            wv: Linear::new(store, rng, group, &format!("{name}/v"), d, d, 1.0),
            wo: Linear::new(store, rng, group, &format!("{name}/o"), d, d, 1.0),
            heads,
            d,
        }
    }

    /// q_seq: [Tq, d], kv_seq: [Tk, d], mask: [Tq, Tk] of 0 / MASK_OFF
    /// added to the scores of every head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_seq: VarId,
        kv_seq: VarId,
        mask: &Tensor,
    ) -> VarId {
        let q = self.wq.forward(tape, store, q_seq);
        let k = self.wk.forward(tape, store, kv_seq);
        let v = self.wv.forward(tape, store, kv_seq);
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hh in 0..self.heads {
            let qh = tape.slice_cols(q, hh * dh, dh);
            let kh = tape.slice_cols(k, hh * dh, dh);
            let vh = tape.slice_cols(v, hh * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const(scores, mask);
            let weights = tape.softmax(scores);
            outs.push(tape.matmul(weights, vh));
        }
        let cat = tape.concat_cols(&outs);
        self.wo.forward(tape, store, cat)
    }
}

/// Post-norm transformer encoder layer; the norm is group_norm with a
/// single group, which normalizes each token over features.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    norm1: GroupNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: GroupNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> EncoderLayer {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, group, &format!("{name}/attn"), d, heads),
            norm1: GroupNorm::new(store, group, &format!("{name}/norm1"), d, 1),
            ff1: Linear::new(store, rng, group, &format!("{name}/ff1"), d, d_ff, 2.0_f64.sqrt()),
            ff2: Linear::new(store, rng, group, &format!("{name}/ff2"), d_ff, d, 1.0),
            norm2: GroupNorm::new(store, group, &format!("{name}/norm2"), d, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId, mask: &Tensor) -> VarId {
        let a = self.attn.forward(tape, store, x, x, mask);
        let r = tape.add(x, a);
        let x = self.norm1.forward(tape, store, r);
        let f = self.ff1.forward(tape, store, x);
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f);
        let r = tape.add(x, f);
        self.norm2.forward(tape, store, r)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    norm1: GroupNorm,
    pub cross_attn: MultiHeadAttention,
    norm2: GroupNorm,
    ff1: Linear,
    ff2: Linear,
    norm3: GroupNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> DecoderLayer {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, rng, group, &format!("{name}/self"), d, heads),
            norm1: GroupNorm::new(store, group, &format!("{name}/norm1"), d, 1),
            cross_attn: MultiHeadAttention::new(store, rng, group, &format!("{name}/cross"), d, heads),
            norm2: GroupNorm::new(store, group, &format!("{name}/norm2"), d, 1),
            ff1: Linear::new(store, rng, group, &format!("{name}/ff1"), d, d_ff, 2.0_f64.sqrt()),
            ff2: Linear::new(store, rng, group, &format!("{name}/ff2"), d_ff, d, 1.0),
            norm3: GroupNorm::new(store, group, &format!("{name}/norm3"), d, 1),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        enc: VarId,
        self_mask: &Tensor,
        cross_mask: &Tensor,
    ) -> VarId {
        let a = self.self_attn.forward(tape, store, x, x, self_mask);
        let r = tape.add(x, a);
        let x = self.norm1.forward(tape, store, r);
        let c = self.cross_attn.forward(tape, store, x, enc, cross_mask);
        let r = tape.add(x, c);
        let x = self.norm2.forward(tape, store, r);
        let f = self.ff1.forward(tape, store, x);
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f);
        let r = tape.add(x, f);
        self.norm3.forward(tape, store, r)
    }
}

/// Residual conv stack shared by the vision encoder and the belief
/// predictor: stem conv, then four stages at channel multipliers
/// 1/2/4/8 with strides 1/2/2/2, flattened to a feature row.
#[derive(Debug, Clone, Copy)]
pub struct ConvTrunkConfig {
    pub in_channels: usize,
    /// Square input edge; must be divisible by 8.
    pub input_hw: usize,
    pub base_channels: usize,
    pub blocks_per_stage: usize,
}

impl ConvTrunkConfig {
    pub fn out_dim(&self) -> usize {
        8 * self.base_channels * (self.input_hw / 8) * (self.input_hw / 8)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTrunk {
    stem: Conv2d,
    stem_norm: GroupNorm,
    blocks: Vec<ResBlock>,
    pub cfg: ConvTrunkConfig,
}

impl ConvTrunk {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        cfg: ConvTrunkConfig,
    ) -> ConvTrunk {
        assert!(cfg.input_hw % 8 == 0, "{name}: input {} not divisible by 8", cfg.input_hw);
        let b = cfg.base_channels;
        let stem = Conv2d::new(
            store, rng, group, &format!("{name}/stem"),
            cfg.in_channels, b, 7, 1, 3, 2.0_f64.sqrt(),
        );
        let stem_norm = GroupNorm::new(store, group, &format!("{name}/stemn"), b, norm_groups(b));
        let mut blocks = Vec::new();
        let mut c_in = b;
        for (stage, (mult, stride)) in [(1, 1), (2, 2), (4, 2), (8, 2)].into_iter().enumerate() {
            let c_out = b * mult;
            for i in 0..cfg.blocks_per_stage {
                let s = if i == 0 { stride } else { 1 };
                blocks.push(ResBlock::new(
                    store, rng, group,
                    &format!("{name}/s{stage}b{i}"),
                    c_in, c_out, s,
                ));
                c_in = c_out;
            }
        }
        ConvTrunk { stem, stem_norm, blocks, cfg }
    }

    /// x: [N, in_channels, input_hw, input_hw] -> [N, out_dim].
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let n = tape.shape(x)[0];
        let hw = self.cfg.input_hw;
        let (mut y, mut h, mut w) = self.stem.forward(tape, store, x, hw, hw);
        y = self.stem_norm.forward(tape, store, y);
        y = tape.relu(y);
        for block in &self.blocks {
            let (o, oh, ow) = block.forward(tape, store, y, h, w);
            y = o;
            h = oh;
            w = ow;
        }
        tape.reshape(y, &[n, self.cfg.out_dim()])
    }
}

/// Sinusoidal position table, [len, d].
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor { shape: vec![len, d], data }
}

/// Bidirectional mask over a left-padded window: slots before
/// `valid_from` are masked as keys everywhere.
pub fn pad_mask(len: usize, valid_from: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for q in 0..len {
        for c in 0..valid_from.min(len) {
            data[q * len + c] = MASK_OFF;
        }
    }
    Tensor { shape: vec![len, len], data }
}

/// Causal mask combined with left padding: query q may see key c only
/// when valid_from <= c <= q.
pub fn causal_pad_mask(len: usize, valid_from: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for q in 0..len {
        for c in 0..len {
            if c > q || c < valid_from {
                data[q * len + c] = MASK_OFF;
            }
        }
    }
    Tensor { shape: vec![len, len], data }
}

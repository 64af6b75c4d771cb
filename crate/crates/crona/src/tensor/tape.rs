//! Reverse-mode tape.
//!
//! Nodes are appended in topological order during the forward pass;
//! `backward` walks them once in reverse, accumulating gradients into a
//! side vector. Saved context (conv dims, normalization statistics,
//! masks) lives inside the op variant so a node is self-contained.
//!
//! Gradients flow only to nodes that can reach a parameter or a leaf
//! explicitly marked as requiring grad; everything else is pruned,
//! which in particular skips the expensive conv input-gradient for
//! observation leaves.

use super::kernels::{self, ConvDims};
use super::params::{ParamId, ParamStore};
use super::Tensor;


#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Param(ParamId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Neg(VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    /// Adds a constant tensor (masks, positional tables). No gradient
    /// into the constant.
    AddConst(VarId),
    /// Identity forward, gradient scaled by the factor on the way back.
    GradScale(VarId, f64),
    MatMul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    AddBias { x: VarId, b: VarId },
    Relu(VarId),
    Gelu(VarId),
    Sigmoid(VarId),
    Exp(VarId),
    Ln(VarId),
    Softmax { x: VarId, cols: usize },
    LogSoftmax { x: VarId, cols: usize },
    Conv2d { x: VarId, w: VarId, bias: Option<VarId>, dims: ConvDims, batch: usize },
    GroupNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
        group_size: usize,
        spatial: usize,
        channels: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(VarId),
    Mean(VarId),
    RowSums { x: VarId, cols: usize },
    ConcatVec(Vec<VarId>),
    StackRows(Vec<VarId>),
    ConcatCols { parts: Vec<VarId>, widths: Vec<usize> },
    SliceCols { x: VarId, start: usize, len: usize, total: usize },
    SelectRows { x: VarId, idx: Vec<usize>, rows: usize },
    SelectPerRow { x: VarId, idx: Vec<usize>, cols: usize },
    Reshape(VarId),
    Transpose { x: VarId, rows: usize, cols: usize },
    MaxElem(VarId, VarId),
    MinElem(VarId, VarId),
    ClampConst { x: VarId, lo: Vec<f64>, hi: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Node-indexed gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient tensors keyed by parameter, aligned with the store.
    /// Parameters untouched by this graph get `None`.
    pub fn into_param_grads(mut self, tape: &Tape, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = self.grads[i].take() {
                    match &mut out[pid.0] {
                        slot @ None => *slot = Some(g),
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, op: Op, value: Tensor) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf { requires_grad: false }, t)
    }

    /// Input that participates in gradient checks.
    pub fn leaf_grad(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf { requires_grad: true }, t)
    }

    /// Injects the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        self.push(Op::Param(id), store.get(id).clone())
    }

    fn bin_same_shape(&self, a: VarId, b: VarId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shapes {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.bin_same_shape(a, b, "add");
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x + y)
                .collect(),
        };
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.bin_same_shape(a, b, "sub");
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x - y)
                .collect(),
        };
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.bin_same_shape(a, b, "mul");
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x * y)
                .collect(),
        };
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().map(|x| -x).collect(),
        };
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().map(|x| x * c).collect(),
        };
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().map(|x| x + c).collect(),
        };
        self.push(Op::AddScalar(a), v)
    }

    pub fn add_const(&mut self, a: VarId, c: &Tensor) -> VarId {
        assert_eq!(self.shape(a), c.shape.as_slice(), "add_const shape");
        let v = Tensor {
            shape: c.shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&c.data)
                .map(|(x, y)| x + y)
                .collect(),
        };
        self.push(Op::AddConst(a), v)
    }

    pub fn grad_scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).clone();
        self.push(Op::GradScale(a, c), v)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (m, k) = self.value(a).as_2d();
        let (k2, n) = self.value(b).as_2d();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let shape = if self.shape(a).len() == 1 && m == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let v = Tensor { shape, data: out };
        self.push(Op::MatMul { a, b, m, k, n }, v)
    }

    /// Row-broadcast bias add: x is [m,n] (or [n]), b is [n].
    pub fn add_bias(&mut self, x: VarId, b: VarId) -> VarId {
        let (m, n) = self.value(x).as_2d();
        assert_eq!(self.value(b).numel(), n, "bias width");
        let bv = &self.value(b).data;
        let mut data = self.value(x).data.clone();
        for r in 0..m {
            for (d, bb) in data[r * n..(r + 1) * n].iter_mut().zip(bv) {
                *d += bb;
            }
        }
        let v = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(Op::AddBias { x, b }, v)
    }

    /// matmul(x, w) + bias with w stored [in, out].
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.push(Op::Relu(a), v)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().map(|&x| gelu(x)).collect(),
        };
        self.push(Op::Gelu(a), v)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self
                .value(a)
                .data
                .iter()
                .map(|&x| 1.0 / (1.0 + (-x).exp()))
                .collect(),
        };
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().map(|x| x.exp()).collect(),
        };
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().map(|x| x.ln()).collect(),
        };
        self.push(Op::Ln(a), v)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let (rows, cols) = self.value(a).as_2d();
        let mut data = self.value(a).data.clone();
        kernels::softmax_rows(&mut data, rows, cols);
        let v = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(Op::Softmax { x: a, cols }, v)
    }

    pub fn log_softmax(&mut self, a: VarId) -> VarId {
        let (rows, cols) = self.value(a).as_2d();
        let mut data = self.value(a).data.clone();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(Op::LogSoftmax { x: a, cols }, v)
    }

    /// x: [N,C,H,W] or [C,H,W]; w: [c_out, c_in*kh*kw]; bias: [c_out].
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        dims: ConvDims,
    ) -> VarId {
        let xs = self.shape(x).to_vec();
        let (batch, chw): (usize, Vec<usize>) = match xs.len() {
            3 => (1, xs.clone()),
            4 => (xs[0], xs[1..].to_vec()),
            _ => panic!("conv2d input rank {} unsupported", xs.len()),
        };
        assert_eq!(chw, vec![dims.c_in, dims.h, dims.w], "conv2d input dims");
        assert!(dims.valid(), "conv2d geometry invalid: {dims:?}");
        assert_eq!(
            self.value(w).numel(),
            dims.c_out * dims.patch(),
            "conv2d kernel size"
        );
        if let Some(b) = bias {
            assert_eq!(self.value(b).numel(), dims.c_out, "conv2d bias size");
        }
        let (oh, ow) = (dims.out_h(), dims.out_w());
        let mut out = vec![0.0; batch * dims.c_out * oh * ow];
        kernels::conv2d_forward(
            &self.value(x).data,
            &self.value(w).data,
            bias.map(|b| self.value(b).data.as_slice()),
            &dims,
            batch,
            &mut out,
        );
        let shape = if xs.len() == 3 {
            vec![dims.c_out, oh, ow]
        } else {
            vec![batch, dims.c_out, oh, ow]
        };
        let v = Tensor { shape, data: out };
        self.push(Op::Conv2d { x, w, bias, dims, batch }, v)
    }

    /// Group normalization over channel groups (spatial dims included).
    /// x: [N,C] or [N,C,H,W]; gamma/beta: [C]. groups must divide C.
    pub fn group_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
        eps: f64,
    ) -> VarId {
        let xs = self.shape(x).to_vec();
        let (n, c, spatial) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            1 => (1, xs[0], 1),
            _ => panic!("group_norm input rank {} unsupported", xs.len()),
        };
        assert!(groups > 0 && c % groups == 0, "groups {groups} vs channels {c}");
        assert_eq!(self.value(gamma).numel(), c, "gamma size");
        assert_eq!(self.value(beta).numel(), c, "beta size");
        let cpg = c / groups;
        let m = cpg * spatial;
        let xd = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut mean = vec![0.0; n * groups];
        let mut rstd = vec![0.0; n * groups];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for g in 0..groups {
                let base = s * c * spatial + g * cpg * spatial;
                let chunk = &xd[base..base + m];
                let mu = chunk.iter().sum::<f64>() / m as f64;
                let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[s * groups + g] = mu;
                rstd[s * groups + g] = rs;
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    for sp in 0..spatial {
                        let i = base + cc * spatial + sp;
                        out[i] = (xd[i] - mu) * rs * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let v = Tensor { shape: xs, data: out };
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                group_size: m,
                spatial,
                channels: c,
                mean,
                rstd,
            },
            v,
        )
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.value(a).numel().max(1);
        let v = Tensor::scalar(self.value(a).data.iter().sum::<f64>() / n as f64);
        self.push(Op::Mean(a), v)
    }

    /// [r,c] -> [r], summing each row.
    pub fn row_sums(&mut self, a: VarId) -> VarId {
        let (rows, cols) = self.value(a).as_2d();
        let d = &self.value(a).data;
        let out: Vec<f64> = (0..rows)
            .map(|r| d[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        self.push(Op::RowSums { x: a, cols }, Tensor::vector(out))
    }

    /// Concatenates rank-1 vectors into one longer vector.
    pub fn concat_vec(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        self.push(Op::ConcatVec(parts.to_vec()), Tensor::vector(data))
    }

    /// Stacks rank-1 vectors of equal length into a [parts, len] matrix.
    pub fn stack_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            assert_eq!(self.value(p).numel(), cols, "stack_rows width");
            data.extend_from_slice(&self.value(p).data);
        }
        let v = Tensor { shape: vec![parts.len(), cols], data };
        self.push(Op::StackRows(parts.to_vec()), v)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).as_2d().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).as_2d().1).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let (r, _) = self.value(p).as_2d();
            assert_eq!(r, rows, "concat_cols row count");
            let src = &self.value(p).data;
            for row in 0..rows {
                data[row * total + off..row * total + off + w]
                    .copy_from_slice(&src[row * w..(row + 1) * w]);
            }
            off += w;
        }
        let v = Tensor { shape: vec![rows, total], data };
        self.push(Op::ConcatCols { parts: parts.to_vec(), widths }, v)
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let (rows, cols) = self.value(x).as_2d();
        assert!(start + len <= cols, "slice_cols out of range");
        let src = &self.value(x).data;
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let shape = if self.shape(x).len() == 1 { vec![len] } else { vec![rows, len] };
        let v = Tensor { shape, data };
        self.push(Op::SliceCols { x, start, len, total: cols }, v)
    }

    /// Gathers rows by index (repeats allowed); backward scatter-adds.
    pub fn select_rows(&mut self, x: VarId, idx: &[usize]) -> VarId {
        let (rows, cols) = self.value(x).as_2d();
        let src = &self.value(x).data;
        let mut data = vec![0.0; idx.len() * cols];
        for (o, &r) in idx.iter().enumerate() {
            assert!(r < rows, "select_rows index {r} >= {rows}");
            data[o * cols..(o + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let v = Tensor { shape: vec![idx.len(), cols], data };
        self.push(Op::SelectRows { x, idx: idx.to_vec(), rows }, v)
    }

    /// out[r] = x[r, idx[r]].
    pub fn select_per_row(&mut self, x: VarId, idx: &[usize]) -> VarId {
        let (rows, cols) = self.value(x).as_2d();
        assert_eq!(idx.len(), rows, "select_per_row length");
        let src = &self.value(x).data;
        let data: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols, "select_per_row column {c} >= {cols}");
                src[r * cols + c]
            })
            .collect();
        self.push(
            Op::SelectPerRow { x, idx: idx.to_vec(), cols },
            Tensor::vector(data),
        )
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(x).numel(), "reshape element count");
        let v = Tensor { shape: shape.to_vec(), data: self.value(x).data.clone() };
        self.push(Op::Reshape(x), v)
    }

    pub fn transpose(&mut self, x: VarId) -> VarId {
        let (rows, cols) = self.value(x).as_2d();
        let src = &self.value(x).data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let v = Tensor { shape: vec![cols, rows], data };
        self.push(Op::Transpose { x, rows, cols }, v)
    }

    /// Elementwise max; ties split the gradient evenly.
    pub fn max_elem(&mut self, a: VarId, b: VarId) -> VarId {
        self.bin_same_shape(a, b, "max_elem");
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x.max(*y))
                .collect(),
        };
        self.push(Op::MaxElem(a, b), v)
    }

    pub fn min_elem(&mut self, a: VarId, b: VarId) -> VarId {
        self.bin_same_shape(a, b, "min_elem");
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x.min(*y))
                .collect(),
        };
        self.push(Op::MinElem(a, b), v)
    }

    /// Clamp against constant per-element bounds. Gradient passes where
    /// the input is within [lo, hi] (inclusive) and is zero outside.
    pub fn clamp_const(&mut self, x: VarId, lo: &[f64], hi: &[f64]) -> VarId {
        let n = self.value(x).numel();
        assert!(lo.len() == n && hi.len() == n, "clamp bounds size");
        let v = Tensor {
            shape: self.shape(x).to_vec(),
            data: self
                .value(x)
                .data
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(x, (l, h))| x.clamp(*l, *h))
                .collect(),
        };
        self.push(Op::ClampConst { x, lo: lo.to_vec(), hi: hi.to_vec() }, v)
    }

    pub fn clamp_scalar(&mut self, x: VarId, lo: f64, hi: f64) -> VarId {
        let n = self.value(x).numel();
        self.clamp_const(x, &vec![lo; n], &vec![hi; n])
    }

    fn parents(&self, i: usize) -> Vec<VarId> {
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MaxElem(a, b)
            | Op::MinElem(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::AddConst(a)
            | Op::GradScale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::RowSums { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. }
            | Op::SelectPerRow { x, .. }
            | Op::Transpose { x, .. }
            | Op::ClampConst { x, .. } => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Conv2d { x, w, bias, .. } => {
                let mut p = vec![*x, *w];
                if let Some(b) = bias {
                    p.push(*b);
                }
                p
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatVec(parts) | Op::StackRows(parts) => parts.clone(),
            Op::ConcatCols { parts, .. } => parts.clone(),
        }
    }

    /// Which nodes can influence a parameter or grad-requiring leaf.
    fn needs_grad_mask(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Param(_) => true,
                Op::Leaf { requires_grad } => *requires_grad,
                _ => self.parents(i).iter().any(|p| needs[p.0]),
            };
        }
        needs
    }

    /// Reverse pass from `root`, seeded with ones. `root` is normally a
    /// scalar loss; a non-scalar root receives a ones seed per element.
    pub fn backward(&self, root: VarId) -> Gradients {
        let needs = self.needs_grad_mask();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            self.accumulate_parents(i, &gy, &needs, &mut grads);
            // Keep gradients on leaves and params; interior grads are
            // dropped once consumed to bound memory.
            match self.nodes[i].op {
                Op::Leaf { .. } | Op::Param(_) => grads[i] = Some(gy),
                _ => {}
            }
        }
        Gradients { grads }
    }

    fn add_grad(grads: &mut [Option<Tensor>], needs: &[bool], id: VarId, shape: &[usize], g: Vec<f64>) {
        if !needs[id.0] {
            return;
        }
        match &mut grads[id.0] {
            slot @ None => {
                *slot = Some(Tensor { shape: shape.to_vec(), data: g });
            }
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }

    fn accumulate_parents(
        &self,
        i: usize,
        gy: &Tensor,
        needs: &[bool],
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } | Op::Param(_) => {}
            Op::Add(a, b) => {
                Self::add_grad(grads, needs, *a, self.shape(*a), gy.data.clone());
                Self::add_grad(grads, needs, *b, self.shape(*b), gy.data.clone());
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, needs, *a, self.shape(*a), gy.data.clone());
                Self::add_grad(grads, needs, *b, self.shape(*b), gy.data.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                Self::add_grad(
                    grads,
                    needs,
                    *a,
                    self.shape(*a),
                    gy.data.iter().zip(bv).map(|(g, v)| g * v).collect(),
                );
                Self::add_grad(
                    grads,
                    needs,
                    *b,
                    self.shape(*b),
                    gy.data.iter().zip(av).map(|(g, v)| g * v).collect(),
                );
            }
            Op::Neg(a) => {
                Self::add_grad(grads, needs, *a, self.shape(*a), gy.data.iter().map(|v| -v).collect());
            }
            Op::Scale(a, c) => {
                Self::add_grad(grads, needs, *a, self.shape(*a), gy.data.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) | Op::AddConst(a) => {
                Self::add_grad(grads, needs, *a, self.shape(*a), gy.data.clone());
            }
            Op::GradScale(a, c) => {
                Self::add_grad(grads, needs, *a, self.shape(*a), gy.data.iter().map(|v| v * c).collect());
            }
            Op::MatMul { a, b, m, k, n } => {
                if needs[a.0] {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_bt(&gy.data, &self.value(*b).data, &mut da, *m, *n, *k);
                    Self::add_grad(grads, needs, *a, self.shape(*a), da);
                }
                if needs[b.0] {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at(&self.value(*a).data, &gy.data, &mut db, *m, *k, *n);
                    Self::add_grad(grads, needs, *b, self.shape(*b), db);
                }
            }
            Op::AddBias { x, b } => {
                let (m, n) = self.value(*x).as_2d();
                Self::add_grad(grads, needs, *x, self.shape(*x), gy.data.clone());
                if needs[b.0] {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, g) in db.iter_mut().zip(&gy.data[r * n..(r + 1) * n]) {
                            *d += g;
                        }
                    }
                    Self::add_grad(grads, needs, *b, self.shape(*b), db);
                }
            }
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                Self::add_grad(
                    grads,
                    needs,
                    *a,
                    self.shape(*a),
                    gy.data
                        .iter()
                        .zip(av)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let av = &self.value(*a).data;
                Self::add_grad(
                    grads,
                    needs,
                    *a,
                    self.shape(*a),
                    gy.data.iter().zip(av).map(|(g, v)| g * gelu_grad(*v)).collect(),
                );
            }
            Op::Sigmoid(a) => {
                let yv = &node.value.data;
                Self::add_grad(
                    grads,
                    needs,
                    *a,
                    self.shape(*a),
                    gy.data.iter().zip(yv).map(|(g, s)| g * s * (1.0 - s)).collect(),
                );
            }
            Op::Exp(a) => {
                let yv = &node.value.data;
                Self::add_grad(
                    grads,
                    needs,
                    *a,
                    self.shape(*a),
                    gy.data.iter().zip(yv).map(|(g, e)| g * e).collect(),
                );
            }
            Op::Ln(a) => {
                let av = &self.value(*a).data;
                Self::add_grad(
                    grads,
                    needs,
                    *a,
                    self.shape(*a),
                    gy.data.iter().zip(av).map(|(g, v)| g / v).collect(),
                );
            }
            Op::Softmax { x, cols } => {
                let p = &node.value.data;
                let rows = p.len() / cols;
                let mut dx = vec![0.0; p.len()];
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &gy.data[r * cols..(r + 1) * cols];
                    let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for c in 0..*cols {
                        dx[r * cols + c] = pr[c] * (gr[c] - dot);
                    }
                }
                Self::add_grad(grads, needs, *x, self.shape(*x), dx);
            }
            Op::LogSoftmax { x, cols } => {
                let lp = &node.value.data;
                let rows = lp.len() / cols;
                let mut dx = vec![0.0; lp.len()];
                for r in 0..rows {
                    let lr = &lp[r * cols..(r + 1) * cols];
                    let gr = &gy.data[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..*cols {
                        dx[r * cols + c] = gr[c] - lr[c].exp() * gsum;
                    }
                }
                Self::add_grad(grads, needs, *x, self.shape(*x), dx);
            }
            Op::Conv2d { x, w, bias, dims, batch } => {
                let want_dx = needs[x.0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    &self.value(*x).data,
                    &self.value(*w).data,
                    &gy.data,
                    dims,
                    *batch,
                    want_dx,
                );
                if want_dx {
                    Self::add_grad(grads, needs, *x, self.shape(*x), dx);
                }
                Self::add_grad(grads, needs, *w, self.shape(*w), dw);
                if let Some(b) = bias {
                    Self::add_grad(grads, needs, *b, self.shape(*b), db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                group_size,
                spatial,
                channels,
                mean,
                rstd,
            } => {
                let xd = &self.value(*x).data;
                let gv = &self.value(*gamma).data;
                let n = xd.len() / (channels * spatial);
                let cpg = channels / groups;
                let m = *group_size;
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; *channels];
                let mut dbeta = vec![0.0; *channels];
                for s in 0..n {
                    for g in 0..*groups {
                        let base = s * channels * spatial + g * cpg * spatial;
                        let mu = mean[s * groups + g];
                        let rs = rstd[s * groups + g];
                        let mut dot = 0.0; // sum dxhat * xhat
                        let mut dsum = 0.0; // sum dxhat
                        for cc in 0..cpg {
                            let ch = g * cpg + cc;
                            for sp in 0..*spatial {
                                let i = base + cc * spatial + sp;
                                let xhat = (xd[i] - mu) * rs;
                                let dy = gy.data[i];
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                let dxhat = dy * gv[ch];
                                dot += dxhat * xhat;
                                dsum += dxhat;
                            }
                        }
                        for cc in 0..cpg {
                            let ch = g * cpg + cc;
                            for sp in 0..*spatial {
                                let i = base + cc * spatial + sp;
                                let xhat = (xd[i] - mu) * rs;
                                let dxhat = gy.data[i] * gv[ch];
                                dx[i] = rs * (dxhat - (xhat * dot + dsum) / m as f64);
                            }
                        }
                    }
                }
                Self::add_grad(grads, needs, *x, self.shape(*x), dx);
                Self::add_grad(grads, needs, *gamma, self.shape(*gamma), dgamma);
                Self::add_grad(grads, needs, *beta, self.shape(*beta), dbeta);
            }
            Op::Sum(a) => {
                let g = gy.item();
                Self::add_grad(grads, needs, *a, self.shape(*a), vec![g; self.value(*a).numel()]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1);
                let g = gy.item() / n as f64;
                Self::add_grad(grads, needs, *a, self.shape(*a), vec![g; self.value(*a).numel()]);
            }
            Op::RowSums { x, cols } => {
                let rows = gy.data.len();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols..(r + 1) * cols].fill(gy.data[r]);
                }
                Self::add_grad(grads, needs, *x, self.shape(*x), dx);
            }
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    Self::add_grad(grads, needs, p, self.shape(p), gy.data[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::StackRows(parts) => {
                let cols = self.value(parts[0]).numel();
                for (r, &p) in parts.iter().enumerate() {
                    Self::add_grad(
                        grads,
                        needs,
                        p,
                        self.shape(p),
                        gy.data[r * cols..(r + 1) * cols].to_vec(),
                    );
                }
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gy.data.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if needs[p.0] {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gy.data[r * total + off..r * total + off + w]);
                        }
                        Self::add_grad(grads, needs, p, self.shape(p), dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start, len, total } => {
                let rows = gy.data.len() / len;
                let mut dx = vec![0.0; rows * total];
                for r in 0..rows {
                    dx[r * total + start..r * total + start + len]
                        .copy_from_slice(&gy.data[r * len..(r + 1) * len]);
                }
                Self::add_grad(grads, needs, *x, self.shape(*x), dx);
            }
            Op::SelectRows { x, idx, rows } => {
                let cols = gy.data.len() / idx.len().max(1);
                let mut dx = vec![0.0; rows * cols];
                for (o, &r) in idx.iter().enumerate() {
                    for (d, g) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&gy.data[o * cols..(o + 1) * cols])
                    {
                        *d += g;
                    }
                }
                Self::add_grad(grads, needs, *x, self.shape(*x), dx);
            }
            Op::SelectPerRow { x, idx, cols } => {
                let mut dx = vec![0.0; idx.len() * cols];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] += gy.data[r];
                }
                Self::add_grad(grads, needs, *x, self.shape(*x), dx);
            }
            Op::Reshape(a) => {
                Self::add_grad(grads, needs, *a, self.shape(*a), gy.data.clone());
            }
            Op::Transpose { x, rows, cols } => {
                // gy is [cols, rows]; route back to [rows, cols].
                let mut dx = vec![0.0; rows * cols];
                for c in 0..*cols {
                    for r in 0..*rows {
                        dx[r * cols + c] = gy.data[c * rows + r];
                    }
                }
                Self::add_grad(grads, needs, *x, self.shape(*x), dx);
            }
            Op::MaxElem(a, b) | Op::MinElem(a, b) => {
                let is_max = matches!(node.op, Op::MaxElem(..));
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for (((g, x), y), (da, db)) in gy
                    .data
                    .iter()
                    .zip(av)
                    .zip(bv)
                    .zip(da.iter_mut().zip(db.iter_mut()))
                {
                    let a_wins = if is_max { x > y } else { x < y };
                    if x == y {
                        *da = 0.5 * g;
                        *db = 0.5 * g;
                    } else if a_wins {
                        *da = *g;
                    } else {
                        *db = *g;
                    }
                }
                Self::add_grad(grads, needs, *a, self.shape(*a), da);
                Self::add_grad(grads, needs, *b, self.shape(*b), db);
            }
            Op::ClampConst { x, lo, hi } => {
                let xv = &self.value(*x).data;
                Self::add_grad(
                    grads,
                    needs,
                    *x,
                    self.shape(*x),
                    gy.data
                        .iter()
                        .zip(xv.iter().zip(lo.iter().zip(hi)))
                        .map(|(g, (v, (l, h)))| if *v >= *l && *v <= *h { *g } else { 0.0 })
                        .collect(),
                );
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.044715;
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.044715;
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_forward_matches_example() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::randn(&[6, 9], &mut rng));
        let y = t.softmax(x);
        let v = t.value(y);
        for r in 0..6 {
            let s: f64 = v.data[r * 9..(r + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv2d_audio_first_layer_shape() {
        // 2x5x5 input, 32 filters of 5x5 at stride 2: one output position.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let dims = ConvDims { c_in: 2, h: 5, w: 5, c_out: 32, kh: 5, kw: 5, stride: 2, pad: 0 };
        let x = t.leaf(Tensor::randn(&[2, 5, 5], &mut rng));
        let w = t.leaf(Tensor::randn(&[32, dims.patch()], &mut rng));
        let b = t.leaf(Tensor::zeros(&[32]));
        let y = t.conv2d(x, w, Some(b), dims);
        assert_eq!(t.shape(y), &[32, 1, 1]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut t = Tape::new();
        let x = t.leaf_grad(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        let g = t.backward(y);
        assert!((g.wrt(x).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let c = t.add(a, b);
        let s = t.sum(c);
        let g = t.backward(s);
        assert!(g.wrt(a).is_none());
        assert!(g.wrt(b).is_none());
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::randn(&[2, 8, 3, 3], &mut rng));
        let gamma = t.leaf(Tensor::full(&[8], 1.0));
        let beta = t.leaf(Tensor::zeros(&[8]));
        let y = t.group_norm(x, gamma, beta, 4, 1e-5);
        let v = t.value(y);
        // Per sample, per group of 2 channels x 9 spatial = 18 values.
        for s in 0..2 {
            for g in 0..4 {
                let base = s * 8 * 9 + g * 2 * 9;
                let chunk = &v.data[base..base + 18];
                let mu: f64 = chunk.iter().sum::<f64>() / 18.0;
                let var: f64 = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 18.0;
                assert!(mu.abs() < 1e-5, "group mean {mu}");
                assert!((var - 1.0).abs() < 1e-4, "group var {var}");
            }
        }
    }

    #[test]
    fn determinism_same_seed_same_results() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut t = Tape::new();
            let x = t.leaf_grad(Tensor::randn(&[4, 6], &mut rng));
            let w = t.leaf_grad(Tensor::randn(&[6, 3], &mut rng));
            let h = t.matmul(x, w);
            let r = t.relu(h);
            let l = t.mean(r);
            let g = t.backward(l);
            (
                t.value(l).item(),
                g.wrt(x).unwrap().data.clone(),
                g.wrt(w).unwrap().data.clone(),
            )
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    /// Finite-difference check for every differentiable op, >= 20 random
    /// seeds each, relative error <= 1e-4 at step 1e-5.
    #[test]
    fn every_op_passes_finite_difference_check() {
        type Builder = fn(&mut Tape, VarId) -> VarId;
        let unary: Vec<(&str, Builder, std::ops::Range<f64>)> = vec![
            ("neg", |t, x| t.neg(x), -2.0..2.0),
            ("scale", |t, x| t.scale(x, 1.7), -2.0..2.0),
            ("add_scalar", |t, x| t.add_scalar(x, 0.3), -2.0..2.0),
            ("relu", |t, x| t.relu(x), 0.1..2.0),
            ("gelu", |t, x| t.gelu(x), -2.0..2.0),
            ("sigmoid", |t, x| t.sigmoid(x), -2.0..2.0),
            ("exp", |t, x| t.exp(x), -1.0..1.0),
            ("ln", |t, x| t.ln(x), 0.2..3.0),
            ("softmax", |t, x| t.softmax(x), -2.0..2.0),
            ("log_softmax", |t, x| t.log_softmax(x), -2.0..2.0),
            ("sum", |t, x| t.sum(x), -2.0..2.0),
            ("mean", |t, x| t.mean(x), -2.0..2.0),
            ("reshape", |t, x| t.reshape(x, &[7]), -2.0..2.0),
            ("clamp", |t, x| t.clamp_scalar(x, -0.9, 0.9), -2.0..2.0),
        ];
        for (name, build, range) in &unary {
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let x0: Vec<f64> = (0..7).map(|_| rng.gen_range(range.clone())).collect();
                let wsum: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let wsum2 = wsum.clone();
                let f = move |xs: &[f64]| {
                    let mut t = Tape::new();
                    let x = t.leaf_grad(Tensor::vector(xs.to_vec()));
                    let y = build(&mut t, x);
                    let yshape = t.shape(y).to_vec();
                    let n = t.value(y).numel();
                    let w = t.leaf(Tensor::new(yshape, wsum2[..n].to_vec()).unwrap());
                    let p = t.mul(y, w);
                    let s = t.sum(p);
                    t.value(s).item()
                };
                let mut t = Tape::new();
                let x = t.leaf_grad(Tensor::vector(x0.clone()));
                let y = build(&mut t, x);
                let yshape = t.shape(y).to_vec();
                let n = t.value(y).numel();
                let w = t.leaf(Tensor::new(yshape, wsum[..n].to_vec()).unwrap());
                let p = t.mul(y, w);
                let s = t.sum(p);
                let g = t.backward(s);
                let analytic = &g.wrt(x).unwrap().data;
                let rep = gradcheck::check_all(&f, &x0, analytic, 1e-5);
                assert!(
                    rep.max_rel_err <= 1e-4,
                    "{name} seed {seed}: rel err {}",
                    rep.max_rel_err
                );
            }
        }
    }

    /// grad_scale is identity forward and deliberately reports a scaled
    /// derivative, so it gets its own check instead of the plain
    /// finite-difference suite.
    #[test]
    fn grad_scale_scales_backward_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let x0: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = |xs: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf_grad(Tensor::vector(xs.to_vec()));
            let y = t.sigmoid(x);
            let s = t.sum(y);
            t.value(s).item()
        };
        let mut t = Tape::new();
        let x = t.leaf_grad(Tensor::vector(x0.clone()));
        let g = t.grad_scale(x, 0.25);
        let y = t.sigmoid(g);
        let s = t.sum(y);
        assert_eq!(t.value(g).data, x0, "grad_scale must be identity forward");
        let grads = t.backward(s);
        let analytic = &grads.wrt(x).unwrap().data;
        for (i, a) in analytic.iter().enumerate() {
            let num = gradcheck::central_diff(&f, &x0, i, 1e-5);
            assert!(
                gradcheck::rel_err(*a, 0.25 * num) <= 1e-4,
                "index {i}: {a} vs 0.25*{num}"
            );
        }
    }

    /// Structural ops (two inputs / matrices) get the same treatment.
    #[test]
    fn structural_ops_pass_finite_difference_check() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            // One flat input is split into the pieces each op needs, so
            // a single finite-difference loop covers them all.
            let x0: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let f = |xs: &[f64]| {
                let mut t = Tape::new();
                let a = t.leaf_grad(Tensor::matrix(3, 4, xs[..12].to_vec()).unwrap());
                let b = t.leaf_grad(Tensor::matrix(4, 3, xs[12..].to_vec()).unwrap());
                let m = t.matmul(a, b); // [3,3]
                let bt = t.transpose(b); // [3,4]
                let sl = t.slice_cols(bt, 1, 2); // [3,2]
                let sel = t.select_rows(m, &[0, 2, 2]); // [3,3]
                let cc = t.concat_cols(&[sel, sl]); // [3,5]
                let pr = t.select_per_row(cc, &[0, 4, 2]); // [3]
                let rs = t.row_sums(cc); // [3]
                let mx = t.max_elem(pr, rs);
                let mn = t.min_elem(pr, rs);
                let both = t.concat_vec(&[mx, mn]);
                let r0 = t.slice_cols(m, 0, 3);
                let flat = t.reshape(r0, &[9]);
                let stacked = t.stack_rows(&[both, both]); // [2,6]
                let s1 = t.sum(stacked);
                let s2 = t.sum(flat);
                let tot = t.add(s1, s2);
                t.value(tot).item()
            };
            let mut t = Tape::new();
            let a = t.leaf_grad(Tensor::matrix(3, 4, x0[..12].to_vec()).unwrap());
            let b = t.leaf_grad(Tensor::matrix(4, 3, x0[12..].to_vec()).unwrap());
            let m = t.matmul(a, b);
            let bt = t.transpose(b);
            let sl = t.slice_cols(bt, 1, 2);
            let sel = t.select_rows(m, &[0, 2, 2]);
            let cc = t.concat_cols(&[sel, sl]);
            let pr = t.select_per_row(cc, &[0, 4, 2]);
            let rs = t.row_sums(cc);
            let mx = t.max_elem(pr, rs);
            let mn = t.min_elem(pr, rs);
            let both = t.concat_vec(&[mx, mn]);
            let r0 = t.slice_cols(m, 0, 3);
            let flat = t.reshape(r0, &[9]);
            let stacked = t.stack_rows(&[both, both]);
            let s1 = t.sum(stacked);
            let s2 = t.sum(flat);
            let tot = t.add(s1, s2);
            let g = t.backward(tot);
            let mut analytic = g.wrt(a).unwrap().data.clone();
            analytic.extend_from_slice(&g.wrt(b).unwrap().data);
            let rep = gradcheck::check_all(&f, &x0, &analytic, 1e-5);
            assert!(rep.max_rel_err <= 1e-4, "seed {seed}: rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn conv_and_group_norm_pass_finite_difference_check() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let dims = ConvDims { c_in: 2, h: 4, w: 4, c_out: 3, kh: 3, kw: 3, stride: 1, pad: 1 };
            let nx = 2 * dims.c_in * dims.h * dims.w;
            let nw = dims.c_out * dims.patch();
            let total = nx + nw + dims.c_out + 2 * dims.c_out;
            let x0: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dims2 = dims;
            let f = move |xs: &[f64]| {
                let mut t = Tape::new();
                let x = t.leaf_grad(
                    Tensor::new(vec![2, dims2.c_in, dims2.h, dims2.w], xs[..nx].to_vec()).unwrap(),
                );
                let w = t.leaf_grad(
                    Tensor::new(vec![dims2.c_out, dims2.patch()], xs[nx..nx + nw].to_vec())
                        .unwrap(),
                );
                let b = t.leaf_grad(Tensor::vector(xs[nx + nw..nx + nw + dims2.c_out].to_vec()));
                let gamma = t.leaf_grad(Tensor::vector(
                    xs[nx + nw + dims2.c_out..nx + nw + 2 * dims2.c_out].to_vec(),
                ));
                let beta = t.leaf_grad(Tensor::vector(xs[nx + nw + 2 * dims2.c_out..].to_vec()));
                let y = t.conv2d(x, w, Some(b), dims2);
                let z = t.group_norm(y, gamma, beta, 3, 1e-5);
                let r = t.gelu(z);
                let s = t.mean(r);
                t.value(s).item()
            };
            let mut t = Tape::new();
            let x = t.leaf_grad(Tensor::new(vec![2, dims.c_in, dims.h, dims.w], x0[..nx].to_vec()).unwrap());
            let w = t.leaf_grad(Tensor::new(vec![dims.c_out, dims.patch()], x0[nx..nx + nw].to_vec()).unwrap());
            let b = t.leaf_grad(Tensor::vector(x0[nx + nw..nx + nw + dims.c_out].to_vec()));
            let gamma = t.leaf_grad(Tensor::vector(x0[nx + nw + dims.c_out..nx + nw + 2 * dims.c_out].to_vec()));
            let beta = t.leaf_grad(Tensor::vector(x0[nx + nw + 2 * dims.c_out..].to_vec()));
            let y = t.conv2d(x, w, Some(b), dims);
            let z = t.group_norm(y, gamma, beta, 3, 1e-5);
            let r = t.gelu(z);
            let s = t.mean(r);
            let g = t.backward(s);
            let mut analytic = g.wrt(x).unwrap().data.clone();
            analytic.extend_from_slice(&g.wrt(w).unwrap().data);
            analytic.extend_from_slice(&g.wrt(b).unwrap().data);
            analytic.extend_from_slice(&g.wrt(gamma).unwrap().data);
            analytic.extend_from_slice(&g.wrt(beta).unwrap().data);
            // Probe a subset; the input is large and central differences
            // cost two forwards per element.
            let probes: Vec<usize> = (0..30).map(|i| (i * 7919) % total).collect();
            let rep = gradcheck::check_probes(&f, &x0, &analytic, &probes, 1e-5);
            assert!(rep.max_rel_err <= 1e-4, "seed {seed}: rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn matmul_bias_chain_matches_finite_difference() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
            let x0: Vec<f64> = (0..2 * 5 + 5 * 3 + 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |xs: &[f64]| {
                let mut t = Tape::new();
                let x = t.leaf_grad(Tensor::matrix(2, 5, xs[..10].to_vec()).unwrap());
                let w = t.leaf_grad(Tensor::matrix(5, 3, xs[10..25].to_vec()).unwrap());
                let b = t.leaf_grad(Tensor::vector(xs[25..].to_vec()));
                let y = t.linear(x, w, b);
                let sm = t.log_softmax(y);
                let s = t.mean(sm);
                t.value(s).item()
            };
            let mut t = Tape::new();
            let x = t.leaf_grad(Tensor::matrix(2, 5, x0[..10].to_vec()).unwrap());
            let w = t.leaf_grad(Tensor::matrix(5, 3, x0[10..25].to_vec()).unwrap());
            let b = t.leaf_grad(Tensor::vector(x0[25..].to_vec()));
            let y = t.linear(x, w, b);
            let sm = t.log_softmax(y);
            let s = t.mean(sm);
            let g = t.backward(s);
            let mut analytic = g.wrt(x).unwrap().data.clone();
            analytic.extend_from_slice(&g.wrt(w).unwrap().data);
            analytic.extend_from_slice(&g.wrt(b).unwrap().data);
            let rep = gradcheck::check_all(&f, &x0, &analytic, 1e-5);
            assert!(rep.max_rel_err <= 1e-4, "seed {seed}: rel err {}", rep.max_rel_err);
        }
    }
}

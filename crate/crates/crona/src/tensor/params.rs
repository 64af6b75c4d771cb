//! Named parameter storage shared by actors, critic, and belief nets.
//!
//! Parameters live outside any tape; a forward pass injects them as
//! nodes via `Tape::param`. The id doubles as the optimizer-state key
//! and the checkpoint ordering, so creation order must be deterministic.

use super::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    /// Encoders, history transformers, policy heads, belief nets.
    Actor,
    /// Centralized value head only.
    Critic,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

/// Orthogonal-style init: Gram-Schmidt over the rows (or columns when
/// cols < rows) of a Gaussian draw, scaled by `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let a = Tensor::randn(&[rows, cols], rng);
    let transposed = rows < cols;
    let (r, c) = if transposed { (cols, rows) } else { (rows, cols) };
    // q: r x c with orthonormal columns, built column by column from
    // column-major locals.
    let mut q = vec![0.0; r * c];
    let mut cols_v: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            (0..r)
                .map(|i| {
                    if transposed {
                        a.data[j * cols + i]
                    } else {
                        a.data[i * cols + j]
                    }
                })
                .collect()
        })
        .collect();
    for j in 0..c {
        for k in 0..j {
            let dot: f64 = cols_v[j].iter().zip(&cols_v[k]).map(|(x, y)| x * y).sum();
            let prev = cols_v[k].clone();
            for (x, p) in cols_v[j].iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm: f64 = cols_v[j].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in cols_v[j].iter_mut() {
            *x /= norm;
        }
    }
    for j in 0..c {
        for i in 0..r {
            q[i * c + j] = cols_v[j][i] * gain;
        }
    }
    if transposed {
        // q is cols x rows; transpose back.
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = q[j * rows + i];
            }
        }
        Tensor { shape: vec![rows, cols], data: out }
    } else {
        Tensor { shape: vec![rows, cols], data: q }
    }
}

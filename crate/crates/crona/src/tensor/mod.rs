//! Dense f64 tensors and the reverse-mode tape built on them.
//!
//! The design is deliberately flat: a `Tensor` is a shape plus a
//! contiguous `Vec<f64>`, a `Tape` is an append-only vector of nodes in
//! topological order, and `backward` walks it once in reverse. No graph
//! reuse across forward passes; callers build a fresh tape per step.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use params::{orthogonal, ParamGroup, ParamId, ParamStore};
pub use tape::{Gradients, Tape, VarId};

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Standard normal entries from the caller's RNG.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        // Box-Muller; consumes uniform pairs so the draw count is fixed.
        let mut i = 0;
        while i < n {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(r * th.cos());
            i += 1;
            if i < n {
                data.push(r * th.sin());
                i += 1;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// (rows, cols) treating rank-1 as a single row.
    pub fn as_2d(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_mismatched_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_is_deterministic_and_roughly_standard() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[1000], &mut r1);
        let b = Tensor::randn(&[1000], &mut r2);
        assert_eq!(a.data, b.data);
        let mean: f64 = a.data.iter().sum::<f64>() / 1000.0;
        let var: f64 = a.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.15, "mean {mean}");
        assert!((var - 1.0).abs() < 0.2, "var {var}");
    }
}

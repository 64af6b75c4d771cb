//! Adam with bias correction plus global gradient-norm clipping.

use super::params::{ParamGroup, ParamStore};
use super::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // eps follows the training setup here, not the 1e-8 textbook value.
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, e)| Tensor::zeros(&e.value.shape)).collect();
        let v = store.iter().map(|(_, e)| Tensor::zeros(&e.value.shape)).collect();
        AdamState { step: 0, m, v }
    }
}

/// Scales all gradients in place so their joint L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for v in &g.data {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One optimizer step. `grads` is aligned with the store; `None` means a
/// zero gradient (the moments still decay, and on a fresh state the
/// update is exactly zero). `lr_of` supplies the per-group rate.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr_of: impl Fn(ParamGroup) -> f64,
) {
    assert_eq!(grads.len(), store.len(), "grads not aligned with store");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let lr = lr_of(store.entry(id).group);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let zero;
        let g: &Tensor = match &grads[i] {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(&store.get(id).shape);
                &zero
            }
        };
        assert_eq!(g.numel(), store.get(id).numel(), "grad shape for param {i}");
        let p = store.get_mut(id);
        for j in 0..p.data.len() {
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g.data[j];
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
            let mhat = m.data[j] / bc1;
            let vhat = v.data[j] / bc2;
            p.data[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", ParamGroup::Actor, Tensor::vector(vec![v]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = one_param_store(1.5);
        let mut st = AdamState::for_store(&s);
        let grads = vec![Some(Tensor::vector(vec![0.0]))];
        adam_step(&mut s, &grads, &mut st, &AdamConfig::default(), |_| 0.01);
        assert_eq!(s.get(crate::tensor::ParamId(0)).data[0], 1.5);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_about_lr() {
        // m_hat = v_hat = 1 after bias correction, so the step is
        // lr / (1 + eps).
        let mut s = one_param_store(0.0);
        let mut st = AdamState::for_store(&s);
        let grads = vec![Some(Tensor::vector(vec![1.0]))];
        let lr = 0.003;
        adam_step(&mut s, &grads, &mut st, &AdamConfig::default(), |_| lr);
        let got = -s.get(crate::tensor::ParamId(0)).data[0];
        assert!((got - lr).abs() < lr * 1e-4, "step {got} vs lr {lr}");
    }

    #[test]
    fn scalar_quadratic_matches_reference_recursion() {
        // Minimize (x - 3)^2 / 2 and compare against a direct transcription
        // of the update equations.
        let cfg = AdamConfig::default();
        let lr = 0.1;
        let mut s = one_param_store(0.0);
        let mut st = AdamState::for_store(&s);
        let (mut xm, mut xv, mut xr) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let x = s.get(crate::tensor::ParamId(0)).data[0];
            assert!((x - xr).abs() < 1e-12, "diverged at step {t}");
            let g = x - 3.0;
            let grads = vec![Some(Tensor::vector(vec![g]))];
            adam_step(&mut s, &grads, &mut st, &cfg, |_| lr);
            xm = cfg.beta1 * xm + (1.0 - cfg.beta1) * g;
            xv = cfg.beta2 * xv + (1.0 - cfg.beta2) * g * g;
            let mh = xm / (1.0 - cfg.beta1.powi(t));
            let vh = xv / (1.0 - cfg.beta2.powi(t));
            xr -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = vec![Some(Tensor::vector(vec![3.0, 4.0]))];
        let norm = clip_global_norm(&mut grads, 0.2);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = grads[0].as_ref().unwrap();
        assert!((g.data[0] - 0.12).abs() < 1e-12);
        assert!((g.data[1] - 0.16).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = vec![Some(Tensor::vector(vec![0.1, 0.1]))];
        clip_global_norm(&mut grads, 0.2);
        assert_eq!(grads[0].as_ref().unwrap().data, vec![0.1, 0.1]);
    }

    #[test]
    fn per_group_learning_rates_apply() {
        let mut s = ParamStore::new();
        s.add("a", ParamGroup::Actor, Tensor::vector(vec![0.0]));
        s.add("c", ParamGroup::Critic, Tensor::vector(vec![0.0]));
        let mut st = AdamState::for_store(&s);
        let grads = vec![
            Some(Tensor::vector(vec![1.0])),
            Some(Tensor::vector(vec![1.0])),
        ];
        adam_step(&mut s, &grads, &mut st, &AdamConfig::default(), |g| match g {
            ParamGroup::Actor => 0.00025,
            ParamGroup::Critic => 0.0002,
        });
        let a = -s.get(crate::tensor::ParamId(0)).data[0];
        let c = -s.get(crate::tensor::ParamId(1)).data[0];
        assert!((a - 0.00025).abs() < 1e-8);
        assert!((c - 0.0002).abs() < 1e-8);
    }
}

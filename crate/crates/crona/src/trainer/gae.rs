//! Generalized advantage estimation over reward streams that may
//! contain several episodes.
//!
//! `values` has one more entry than `rewards`: the tail slot is the
//! bootstrap value of the observation after the last step (zero when
//! that step ended its episode). `mask[t]` is 0 exactly when the
//! episode terminated at step t, which cuts both the TD target and the
//! advantage recursion so nothing leaks across a reset.

/// Returns (advantages, returns) with returns\[t\] = adv\[t\] + values\[t\].
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    mask: &[f64],
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len + 1, "values need a bootstrap tail slot");
    assert_eq!(mask.len(), t_len, "one mask entry per step");
    let mut adv = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + gamma * mask[t] * values[t + 1] - values[t];
        acc = delta + gamma * lam * mask[t] * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// In-place standardization to zero mean, unit variance; the optional
/// path behind the advantage-normalization switch.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / denom;
    }
}

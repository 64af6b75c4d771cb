//! PPO loss pieces: clipped value surrogate, clipped policy objective
//! with entropy bonus, and the weighted combination whose single
//! backward pass drives every parameter group.
//!
//! Each piece exists twice: a plain-scalar form used for reporting and
//! as an oracle, and a tape form used inside the update graph. Tests
//! hold the two equal on random batches.

use crate::tensor::{Tape, Tensor, VarId};

/// Mean over the batch of max((V_new - R)^2, (clip(V_new, V_old +- xi) - R)^2).
pub fn value_loss_scalar(v_new: &[f64], v_old: &[f64], ret: &[f64], xi: f64) -> f64 {
    assert!(v_new.len() == v_old.len() && v_new.len() == ret.len());
    assert!(!v_new.is_empty());
    let mut acc = 0.0;
    for ((vn, vo), r) in v_new.iter().zip(v_old).zip(ret) {
        let plain = (vn - r) * (vn - r);
        let clipped = vn.clamp(vo - xi, vo + xi) - r;
        acc += plain.max(clipped * clipped);
    }
    acc / v_new.len() as f64
}

/// Tape form of the clipped value loss; `v_new` may be [T] or [T, 1].
pub fn value_loss_tape(
    tape: &mut Tape,
    v_new: VarId,
    v_old: &[f64],
    ret: &[f64],
    xi: f64,
) -> VarId {
    let shape = tape.shape(v_new).to_vec();
    let n: usize = shape.iter().product();
    assert!(v_old.len() == n && ret.len() == n, "value loss batch sizes");
    let lo: Vec<f64> = v_old.iter().map(|v| v - xi).collect();
    let hi: Vec<f64> = v_old.iter().map(|v| v + xi).collect();
    let clipped = tape.clamp_const(v_new, &lo, &hi);
    let r = tape.leaf(Tensor::new(shape, ret.to_vec()).expect("return tensor"));
    let d_plain = tape.sub(v_new, r);
    let s_plain = tape.mul(d_plain, d_plain);
    let d_clip = tape.sub(clipped, r);
    let s_clip = tape.mul(d_clip, d_clip);
    let worst = tape.max_elem(s_plain, s_clip);
    tape.mean(worst)
}

/// Mean over the batch of min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)
/// plus beta times the mean entropy; rho = exp(logp_new - logp_old).
pub fn policy_objective_scalar(
    logp_new: &[f64],
    logp_old: &[f64],
    adv: &[f64],
    entropy: &[f64],
    eps: f64,
    beta: f64,
) -> f64 {
    assert!(logp_new.len() == logp_old.len() && logp_new.len() == adv.len());
    assert_eq!(logp_new.len(), entropy.len());
    assert!(!logp_new.is_empty());
    let mut surr = 0.0;
    for ((ln, lo), a) in logp_new.iter().zip(logp_old).zip(adv) {
        let rho = (ln - lo).exp();
        surr += (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a);
    }
    let n = logp_new.len() as f64;
    surr / n + beta * entropy.iter().sum::<f64>() / n
}

/// Tape form of the clipped policy objective. `logp_sel` and `entropy`
/// are [T] rows from the live graph; old log-probs and advantages are
/// constants of the batch.
pub fn policy_objective_tape(
    tape: &mut Tape,
    logp_sel: VarId,
    entropy: VarId,
    logp_old: &[f64],
    adv: &[f64],
    eps: f64,
    beta: f64,
) -> VarId {
    let n = tape.value(logp_sel).numel();
    assert!(logp_old.len() == n && adv.len() == n, "policy objective batch sizes");
    let old = tape.leaf(Tensor::vector(logp_old.to_vec()));
    let diff = tape.sub(logp_sel, old);
    let rho = tape.exp(diff);
    let a = tape.leaf(Tensor::vector(adv.to_vec()));
    let s_plain = tape.mul(rho, a);
    let rho_clip = tape.clamp_scalar(rho, 1.0 - eps, 1.0 + eps);
    let s_clip = tape.mul(rho_clip, a);
    let surr = tape.min_elem(s_plain, s_clip);
    let m = tape.mean(surr);
    let h = tape.mean(entropy);
    let hb = tape.scale(h, beta);
    tape.add(m, hb)
}

/// Per-row entropy -sum_a p ln p from a [T, A] log-probability matrix.
pub fn entropy_rows(tape: &mut Tape, logp: VarId) -> VarId {
    let p = tape.exp(logp);
    let pl = tape.mul(p, logp);
    let s = tape.row_sums(pl);
    tape.neg(s)
}

/// The combined loss: -mu * sum_i J_i + ((1 - mu) / n) * L + w_b * sum L_belief.
/// Minimizing it maximizes each agent's objective while down-weighting
/// the value gradient into shared modules by the agent count.
pub fn combined_loss(
    j_sum: f64,
    value_loss: f64,
    belief_sum: f64,
    n_agents: usize,
    mu: f64,
    belief_weight: f64,
) -> f64 {
    -mu * j_sum + (1.0 - mu) / n_agents as f64 * value_loss + belief_weight * belief_sum
}

/// Tape form of `combined_loss` over live scalar nodes.
pub fn combined_loss_tape(
    tape: &mut Tape,
    j_terms: &[VarId],
    value_loss: VarId,
    belief_terms: &[VarId],
    n_agents: usize,
    mu: f64,
    belief_weight: f64,
) -> VarId {
    assert!(!j_terms.is_empty());
    let mut j_sum = j_terms[0];
    for &j in &j_terms[1..] {
        j_sum = tape.add(j_sum, j);
    }
    let neg_j = tape.scale(j_sum, -mu);
    let v = tape.scale(value_loss, (1.0 - mu) / n_agents as f64);
    let mut total = tape.add(neg_j, v);
    if !belief_terms.is_empty() {
        let mut b_sum = belief_terms[0];
        for &b in &belief_terms[1..] {
            b_sum = tape.add(b_sum, b);
        }
        let bw = tape.scale(b_sum, belief_weight);
        total = tape.add(total, bw);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn value_loss_frozen_example() {
        // One step past the clip band: plain term 1, clipped term
        // (1.25 - 1)^2 = 0.0625, max = 1.
        let loss = value_loss_scalar(&[2.0], &[1.0], &[1.0], 0.25);
        assert!((loss - 1.0).abs() < 1e-9);
        // Perfect prediction is free.
        assert_eq!(value_loss_scalar(&[0.7], &[0.7], &[0.7], 0.25), 0.0);
        // Mean over a batch of the two cases.
        let loss = value_loss_scalar(&[2.0, 0.7], &[1.0, 0.7], &[1.0, 0.7], 0.25);
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn policy_objective_frozen_example() {
        // rho = 0.6 / 0.4 = 1.5 clipped to 1.2 with a unit advantage.
        let j = policy_objective_scalar(
            &[0.6f64.ln()],
            &[0.4f64.ln()],
            &[1.0],
            &[0.0],
            0.2,
            0.05,
        );
        assert!((j - 1.2).abs() < 1e-9);
    }

    #[test]
    fn unit_ratio_reduces_to_mean_advantage_plus_entropy() {
        let lp = [-0.3, -1.2, -2.0];
        let adv = [0.5, -1.5, 2.5];
        let ent = [0.9, 1.1, 1.3];
        let j = policy_objective_scalar(&lp, &lp, &adv, &ent, 0.2, 0.05);
        let want = adv.iter().sum::<f64>() / 3.0 + 0.05 * ent.iter().sum::<f64>() / 3.0;
        assert!((j - want).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_frozen_example() {
        let l = combined_loss(2.0, 3.0, 0.0, 2, 0.67, 1.0);
        assert!((l - (-0.845)).abs() < 1e-9, "{l}");
        // mu = 1 removes the value term entirely.
        assert_eq!(combined_loss(2.0, 123.0, 0.0, 2, 1.0, 1.0), -2.0);
        // Belief losses enter with their weight.
        let l = combined_loss(2.0, 3.0, 0.5, 2, 0.67, 2.0);
        assert!((l - (-0.845 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn tape_forms_match_scalar_forms_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..12);
            let v_new: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v_old: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ret: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let xi = rng.gen_range(0.05..0.5);
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::vector(v_new.clone()));
            let l = value_loss_tape(&mut tape, v, &v_old, &ret, xi);
            let want = value_loss_scalar(&v_new, &v_old, &ret, xi);
            assert!((tape.value(l).item() - want).abs() < 1e-12);

            let lp_new: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.1..3.0)).collect();
            let lp_old: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.1..3.0)).collect();
            let adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ent: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.3)).collect();
            let (eps, beta) = (rng.gen_range(0.05..0.4), rng.gen_range(0.0..0.1));
            let mut tape = Tape::new();
            let lp = tape.leaf(Tensor::vector(lp_new.clone()));
            let e = tape.leaf(Tensor::vector(ent.clone()));
            let j = policy_objective_tape(&mut tape, lp, e, &lp_old, &adv, eps, beta);
            let want = policy_objective_scalar(&lp_new, &lp_old, &adv, &ent, eps, beta);
            assert!((tape.value(j).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_tape_matches_scalar_and_routes_terms() {
        let mut tape = Tape::new();
        let j0 = tape.leaf_grad(Tensor::scalar(0.8));
        let j1 = tape.leaf_grad(Tensor::scalar(1.2));
        let v = tape.leaf_grad(Tensor::scalar(3.0));
        let b = tape.leaf_grad(Tensor::scalar(0.5));
        let total = combined_loss_tape(&mut tape, &[j0, j1], v, &[b], 2, 0.67, 2.0);
        let want = combined_loss(2.0, 3.0, 0.5, 2, 0.67, 2.0);
        assert!((tape.value(total).item() - want).abs() < 1e-12);

        let grads = tape.backward(total);
        assert!((grads.wrt(j0).unwrap().item() - (-0.67)).abs() < 1e-12);
        assert!((grads.wrt(v).unwrap().item() - 0.165).abs() < 1e-12);
        assert!((grads.wrt(b).unwrap().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn value_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 9;
        let v_new: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v_old: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ret: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let v = tape.leaf_grad(Tensor::vector(v_new.clone()));
        let l = value_loss_tape(&mut tape, v, &v_old, &ret, 0.25);
        let grads = tape.backward(l);
        let analytic = grads.wrt(v).unwrap().data.clone();

        let f = |x: &[f64]| value_loss_scalar(x, &v_old, &ret, 0.25);
        let probes: Vec<usize> = (0..n).collect();
        let rep = gradcheck::check_probes(&f, &v_new, &analytic, &probes, 1e-6);
        assert!(rep.max_rel_err < 1e-4, "err {}", rep.max_rel_err);
    }

    #[test]
    fn policy_objective_gradient_through_log_softmax() {
        // Full path the update uses: logits -> log_softmax ->
        // select_per_row -> objective, checked against central
        // differences on the logits.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = 6;
        let logits0: Vec<f64> = (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let actions: Vec<usize> = (0..t).map(|_| rng.gen_range(0..4)).collect();
        let lp_old: Vec<f64> = (0..t).map(|_| -rng.gen_range(0.5..2.0)).collect();
        let adv: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.5..1.5)).collect();

        let eval = |flat: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(t, 4, flat.to_vec()).unwrap());
            let logp = tape.log_softmax(x);
            let sel = tape.select_per_row(logp, &actions);
            let ent = entropy_rows(&mut tape, logp);
            let j = policy_objective_tape(&mut tape, sel, ent, &lp_old, &adv, 0.2, 0.05);
            tape.value(j).item()
        };

        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::matrix(t, 4, logits0.clone()).unwrap());
        let logp = tape.log_softmax(x);
        let sel = tape.select_per_row(logp, &actions);
        let ent = entropy_rows(&mut tape, logp);
        let j = policy_objective_tape(&mut tape, sel, ent, &lp_old, &adv, 0.2, 0.05);
        let grads = tape.backward(j);
        let analytic = grads.wrt(x).unwrap().data.clone();

        let probes: Vec<usize> = (0..t * 4).collect();
        let rep = gradcheck::check_probes(&eval, &logits0, &analytic, &probes, 1e-6);
        assert!(rep.max_rel_err < 1e-4, "err {}", rep.max_rel_err);
    }

    #[test]
    fn unit_ratio_surrogate_gradient_is_the_score_function_gradient() {
        // With logp_old frozen at the current log-probs the ratio is
        // exactly one, and the clipped surrogate's gradient must equal
        // the plain advantage-weighted score-function gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = 5;
        let logits0: Vec<f64> = (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let actions: Vec<usize> = (0..t).map(|_| rng.gen_range(0..4)).collect();
        let adv: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.5..1.5)).collect();

        let lp_old: Vec<f64> = {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(t, 4, logits0.clone()).unwrap());
            let logp = tape.log_softmax(x);
            let sel = tape.select_per_row(logp, &actions);
            tape.value(sel).data.clone()
        };

        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::matrix(t, 4, logits0.clone()).unwrap());
        let logp = tape.log_softmax(x);
        let sel = tape.select_per_row(logp, &actions);
        let ent = entropy_rows(&mut tape, logp);
        let j = policy_objective_tape(&mut tape, sel, ent, &lp_old, &adv, 0.2, 0.0);
        let g_surr = tape.backward(j).wrt(x).unwrap().data.clone();

        let mut tape = Tape::new();
        let x2 = tape.leaf_grad(Tensor::matrix(t, 4, logits0.clone()).unwrap());
        let logp2 = tape.log_softmax(x2);
        let sel2 = tape.select_per_row(logp2, &actions);
        let a = tape.leaf(Tensor::vector(adv.to_vec()));
        let weighted = tape.mul(sel2, a);
        let score = tape.mean(weighted);
        let g_score = tape.backward(score).wrt(x2).unwrap().data.clone();

        for (s, v) in g_surr.iter().zip(&g_score) {
            assert!((s - v).abs() < 1e-9, "{s} vs {v}");
        }
    }
}

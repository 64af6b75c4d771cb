//! Central finite differences against analytic gradients.
//!
//! Used by unit tests, the acceptance suite, and the `verify` CLI verb.
//! The checker stays independent of the tape: it only needs a scalar
//! function of a flat input.

#[derive(Debug, Clone, Copy)]
pub struct ProbeReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// d f / d x_i by central differences.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

pub fn check_probes(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    probes: &[usize],
    h: f64,
) -> ProbeReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut worst = 0.0;
    let mut worst_index = 0;
    for &i in probes {
        let num = central_diff(f, x, i, h);
        let e = rel_err(analytic[i], num);
        if e > worst {
            worst = e;
            worst_index = i;
        }
    }
    ProbeReport {
        max_rel_err: worst,
        worst_index,
        checked: probes.len(),
    }
}

pub fn check_all(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> ProbeReport {
    let probes: Vec<usize> = (0..x.len()).collect();
    check_probes(f, x, analytic, &probes, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_exactly() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![1.0, -2.0, 0.5];
        let analytic = vec![2.0, -4.0, 1.0];
        let rep = check_all(&f, &x, &analytic, 1e-5);
        assert!(rep.max_rel_err < 1e-9, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |x: &[f64]| x[0] * x[0];
        let rep = check_all(&f, &[3.0], &[5.0], 1e-5);
        assert!(rep.max_rel_err > 1e-2);
    }
}

//! A tiny tabular two-agent POMDP harness for checking that the
//! centralized value target is unbiased: for every reachable joint
//! history h, the expectation of the state value over the filtering
//! distribution p(s | h) must equal the history value V(h).
//!
//! The two sides are computed by deliberately different routes. V(h)
//! comes from brute-force enumeration of complete trajectories,
//! averaging realized returns over every trajectory consistent with h.
//! The estimator side samples states from p(s | h) and evaluates a
//! state-value table built by backward recursion. Neither side can
//! borrow the other's intermediate results.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sided 99% normal quantile.
const Z99: f64 = 2.5758293035489004;
/// Absolute slack so point-mass beliefs (zero variance) still pass.
const CI_SLACK: f64 = 1e-9;
const MAX_STATES: usize = 10;
const MAX_HORIZON: usize = 4;
const MAX_TRAJECTORIES: f64 = 2e6;

/// Finite-horizon two-agent POMDP with deterministic per-agent
/// observations of the state.
#[derive(Debug, Clone)]
pub struct TabularDecPomdp {
    pub horizon: usize,
    pub init: Vec<f64>,
    /// Observation index each agent receives in each state.
    pub agent_obs: [Vec<usize>; 2],
    pub n_obs: [usize; 2],
    pub n_actions: [usize; 2],
    /// trans[s][joint action] -> sparse next-state distribution.
    pub trans: Vec<Vec<Vec<(usize, f64)>>>,
    /// reward[s][joint action].
    pub reward: Vec<Vec<f64>>,
}

impl TabularDecPomdp {
    pub fn n_states(&self) -> usize {
        self.init.len()
    }

    pub fn n_joint(&self) -> usize {
        self.n_actions[0] * self.n_actions[1]
    }

    pub fn joint_index(&self, a0: usize, a1: usize) -> usize {
        a0 * self.n_actions[1] + a1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 || n > MAX_STATES {
            return Err(Error::config(format!(
                "harness supports 1..={MAX_STATES} states, got {n}"
            )));
        }
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return Err(Error::config(format!(
                "harness supports horizon 1..={MAX_HORIZON}, got {}",
                self.horizon
            )));
        }
        let traj = n as f64 * (self.n_joint() as f64 * n as f64).powi(self.horizon as i32);
        if traj > MAX_TRAJECTORIES {
            return Err(Error::config(format!(
                "{traj:.0} trajectories exceed the enumeration budget"
            )));
        }
        let close = |x: f64| (x - 1.0).abs() < 1e-12;
        if !close(self.init.iter().sum()) {
            return Err(Error::invalid("initial distribution must sum to 1"));
        }
        for i in 0..2 {
            if self.agent_obs[i].len() != n
                || self.agent_obs[i].iter().any(|&o| o >= self.n_obs[i])
            {
                return Err(Error::invalid(format!("agent {i} observation table malformed")));
            }
        }
        if self.trans.len() != n || self.reward.len() != n {
            return Err(Error::shape("transition or reward table has wrong state count"));
        }
        for s in 0..n {
            if self.trans[s].len() != self.n_joint() || self.reward[s].len() != self.n_joint() {
                return Err(Error::shape(format!("state {s} tables sized for wrong action count")));
            }
            for dist in &self.trans[s] {
                if !close(dist.iter().map(|(_, p)| p).sum()) {
                    return Err(Error::invalid(format!("transition from state {s} must sum to 1")));
                }
                if dist.iter().any(|&(t, p)| t >= n || p < 0.0) {
                    return Err(Error::invalid(format!("transition from state {s} malformed")));
                }
            }
        }
        Ok(())
    }
}

/// Per-agent reactive policy: a distribution over actions for each
/// observation. probs[agent][obs][action].
#[derive(Debug, Clone)]
pub struct ReactivePolicy {
    pub probs: [Vec<Vec<f64>>; 2],
}

impl ReactivePolicy {
    pub fn validate(&self, pomdp: &TabularDecPomdp) -> Result<()> {
        for i in 0..2 {
            if self.probs[i].len() != pomdp.n_obs[i] {
                return Err(Error::shape(format!("agent {i} policy has wrong observation count")));
            }
            for row in &self.probs[i] {
                if row.len() != pomdp.n_actions[i]
                    || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12
                    || row.iter().any(|p| *p < 0.0)
                {
                    return Err(Error::invalid(format!("agent {i} policy row malformed")));
                }
            }
        }
        Ok(())
    }

    fn joint_prob(&self, pomdp: &TabularDecPomdp, s: usize, a0: usize, a1: usize) -> f64 {
        self.probs[0][pomdp.agent_obs[0][s]][a0] * self.probs[1][pomdp.agent_obs[1][s]][a1]
    }
}

/// v[t][s] = expected return from step t in state s, v[horizon] = 0.
pub fn state_values(pomdp: &TabularDecPomdp, policy: &ReactivePolicy) -> Vec<Vec<f64>> {
    let n = pomdp.n_states();
    let mut v = vec![vec![0.0; n]; pomdp.horizon + 1];
    for t in (0..pomdp.horizon).rev() {
        for s in 0..n {
            let mut acc = 0.0;
            for a0 in 0..pomdp.n_actions[0] {
                for a1 in 0..pomdp.n_actions[1] {
                    let pa = policy.joint_prob(pomdp, s, a0, a1);
                    if pa == 0.0 {
                        continue;
                    }
                    let j = pomdp.joint_index(a0, a1);
                    let mut q = pomdp.reward[s][j];
                    for &(s2, p) in &pomdp.trans[s][j] {
                        q += p * v[t + 1][s2];
                    }
                    acc += pa * q;
                }
            }
            v[t][s] = acc;
        }
    }
    v
}

/// Accumulated statistics for one joint history ending at an
/// observation pair. Keys encode [o0, o1, a0, a1, o0, o1, ...].
#[derive(Debug, Clone)]
struct HistAcc {
    weight: f64,
    weighted_return: f64,
    state_weight: Vec<f64>,
}

/// Enumerate complete trajectories and scatter weights, returns, and
/// state occupancies to every history prefix.
fn enumerate_histories(
    pomdp: &TabularDecPomdp,
    policy: &ReactivePolicy,
) -> BTreeMap<Vec<usize>, HistAcc> {
    let n = pomdp.n_states();
    let mut map: BTreeMap<Vec<usize>, HistAcc> = BTreeMap::new();
    // Stack frames: (t, state, probability, rewards so far, encoded
    // history, visited states in time order).
    let mut stack = Vec::new();
    for s in 0..n {
        if pomdp.init[s] > 0.0 {
            stack.push((0usize, s, pomdp.init[s], Vec::new(), Vec::new(), Vec::new()));
        }
    }
    while let Some((t, s, p, rewards, mut hist, mut states)) = stack.pop() {
        hist.push(pomdp.agent_obs[0][s]);
        hist.push(pomdp.agent_obs[1][s]);
        states.push(s);
        if t == pomdp.horizon {
            // Complete: credit every prefix with the tail return.
            finalize(pomdp, &mut map, p, &rewards, &hist, &states);
            continue;
        }
        for a0 in 0..pomdp.n_actions[0] {
            for a1 in 0..pomdp.n_actions[1] {
                let pa = policy.joint_prob(pomdp, s, a0, a1);
                if pa == 0.0 {
                    continue;
                }
                let j = pomdp.joint_index(a0, a1);
                for &(s2, pt) in &pomdp.trans[s][j] {
                    if pt == 0.0 {
                        continue;
                    }
                    let mut r2 = rewards.clone();
                    r2.push(pomdp.reward[s][j]);
                    let mut h2 = hist.clone();
                    h2.push(a0);
                    h2.push(a1);
                    stack.push((t + 1, s2, p * pa * pt, r2, h2, states.clone()));
                }
            }
        }
    }
    map
}

fn finalize(
    pomdp: &TabularDecPomdp,
    map: &mut BTreeMap<Vec<usize>, HistAcc>,
    p: f64,
    rewards: &[f64],
    hist: &[usize],
    states: &[usize],
) {
    // The trajectory visits horizon + 1 observation points; the last
    // one has no future reward and is skipped.
    for t in 0..pomdp.horizon {
        let key = hist[..4 * t + 2].to_vec();
        let tail: f64 = rewards[t..].iter().sum();
        let acc = map.entry(key).or_insert_with(|| HistAcc {
            weight: 0.0,
            weighted_return: 0.0,
            state_weight: vec![0.0; pomdp.n_states()],
        });
        acc.weight += p;
        acc.weighted_return += p * tail;
        acc.state_weight[states[t]] += p;
    }
}

/// Filtering distribution p(s_t | h) computed recursively, used to
/// cross-check the enumeration in tests. `hist` is an encoded key.
pub fn filter_belief(
    pomdp: &TabularDecPomdp,
    hist: &[usize],
) -> Result<Vec<f64>> {
    if hist.len() % 4 != 2 {
        return Err(Error::invalid("history must end at an observation pair"));
    }
    let n = pomdp.n_states();
    let consistent = |s: usize, o0: usize, o1: usize| {
        pomdp.agent_obs[0][s] == o0 && pomdp.agent_obs[1][s] == o1
    };
    let mut b: Vec<f64> = (0..n)
        .map(|s| if consistent(s, hist[0], hist[1]) { pomdp.init[s] } else { 0.0 })
        .collect();
    let steps = hist.len() / 4;
    for k in 0..steps {
        let a0 = hist[4 * k + 2];
        let a1 = hist[4 * k + 3];
        let o0 = hist[4 * k + 4];
        let o1 = hist[4 * k + 5];
        let j = pomdp.joint_index(a0, a1);
        let mut next = vec![0.0; n];
        for s in 0..n {
            if b[s] == 0.0 {
                continue;
            }
            for &(s2, p) in &pomdp.trans[s][j] {
                if consistent(s2, o0, o1) {
                    next[s2] += b[s] * p;
                }
            }
        }
        b = next;
    }
    let z: f64 = b.iter().sum();
    if z <= 0.0 {
        return Err(Error::invalid("history has zero probability"));
    }
    for v in &mut b {
        *v /= z;
    }
    Ok(b)
}

/// Statistical comparison for one reachable history.
#[derive(Debug, Clone)]
pub struct HistoryReport {
    pub key: Vec<usize>,
    pub prob: f64,
    pub exact: f64,
    pub empirical: f64,
    pub ci_half: f64,
    pub within: bool,
}

#[derive(Debug, Clone)]
pub struct UnbiasednessReport {
    pub histories: Vec<HistoryReport>,
    pub samples_per_history: usize,
    pub all_within: bool,
}

/// Check E_{s ~ p(s|h)}[v_t(s)] against V(h) for every reachable h
/// with a 99% confidence interval. `bias_state` adds 1 to the sampled
/// value whenever that state is drawn, the canonical broken estimator
/// the check must reject.
pub fn unbiasedness_report(
    pomdp: &TabularDecPomdp,
    policy: &ReactivePolicy,
    samples_per_history: usize,
    seed: u64,
    bias_state: Option<usize>,
) -> Result<UnbiasednessReport> {
    pomdp.validate()?;
    policy.validate(pomdp)?;
    if samples_per_history < 2 {
        return Err(Error::config("need at least 2 samples per history"));
    }
    let v = state_values(pomdp, policy);
    let map = enumerate_histories(pomdp, policy);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut histories = Vec::with_capacity(map.len());
    let mut all_within = true;
    for (key, acc) in map {
        let t = (key.len() - 2) / 4;
        let exact = acc.weighted_return / acc.weight;
        let belief: Vec<f64> = acc.state_weight.iter().map(|w| w / acc.weight).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..samples_per_history {
            let mut u: f64 = rng.gen();
            let mut s = belief.len() - 1;
            for (i, p) in belief.iter().enumerate() {
                u -= p;
                if u < 0.0 {
                    s = i;
                    break;
                }
            }
            let mut x = v[t][s];
            if bias_state == Some(s) {
                x += 1.0;
            }
            sum += x;
            sumsq += x * x;
        }
        let n = samples_per_history as f64;
        let mean = sum / n;
        let var = ((sumsq - sum * sum / n) / (n - 1.0)).max(0.0);
        let ci_half = Z99 * (var / n).sqrt();
        let within = (mean - exact).abs() <= ci_half + CI_SLACK;
        all_within &= within;
        histories.push(HistoryReport { key, prob: acc.weight, exact, empirical: mean, ci_half, within });
    }
    Ok(UnbiasednessReport { histories, samples_per_history, all_within })
}

/// Two hidden coin states, both agents blind (one constant
/// observation). Pressing drives the coin toward heads; rewards pay
/// for heads and charge for presses, so history values genuinely
/// depend on the action sequence while beliefs stay non-degenerate.
pub fn coin_flip_pomdp() -> (TabularDecPomdp, ReactivePolicy) {
    let n_joint = 4;
    let mut trans = vec![vec![Vec::new(); n_joint]; 2];
    let mut reward = vec![vec![0.0; n_joint]; 2];
    for s in 0..2 {
        for a0 in 0..2 {
            for a1 in 0..2 {
                let j = a0 * 2 + a1;
                let presses = (a0 + a1) as f64;
                let p_heads = 0.15 + 0.3 * presses + 0.2 * s as f64;
                trans[s][j] = vec![(1, p_heads), (0, 1.0 - p_heads)];
                reward[s][j] = s as f64 - 0.1 * presses;
            }
        }
    }
    let pomdp = TabularDecPomdp {
        horizon: 3,
        init: vec![0.5, 0.5],
        agent_obs: [vec![0, 0], vec![0, 0]],
        n_obs: [1, 1],
        n_actions: [2, 2],
        trans,
        reward,
    };
    let policy = ReactivePolicy {
        probs: [vec![vec![0.7, 0.3]], vec![vec![0.4, 0.6]]],
    };
    (pomdp, policy)
}

/// Same dynamics but both agents observe the state exactly, so every
/// filtering distribution is a point mass and the estimator must match
/// the history value without sampling error.
pub fn fully_observable_pomdp() -> (TabularDecPomdp, ReactivePolicy) {
    let (mut pomdp, _) = coin_flip_pomdp();
    pomdp.agent_obs = [vec![0, 1], vec![0, 1]];
    pomdp.n_obs = [2, 2];
    let policy = ReactivePolicy {
        probs: [
            vec![vec![0.8, 0.2], vec![0.5, 0.5]],
            vec![vec![0.3, 0.7], vec![0.6, 0.4]],
        ],
    };
    (pomdp, policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_validate() {
        let (p, pi) = coin_flip_pomdp();
        p.validate().unwrap();
        pi.validate(&p).unwrap();
        let (p, pi) = fully_observable_pomdp();
        p.validate().unwrap();
        pi.validate(&p).unwrap();
    }

    #[test]
    fn oversized_problems_are_rejected() {
        let (mut p, _) = coin_flip_pomdp();
        p.horizon = 5;
        assert!(p.validate().is_err(), "horizon 5 must be rejected");

        let (mut p, _) = coin_flip_pomdp();
        let n = 11;
        p.init = vec![1.0 / n as f64; n];
        p.agent_obs = [vec![0; n], vec![0; n]];
        p.trans = vec![vec![vec![(0, 1.0)]; 4]; n];
        p.reward = vec![vec![0.0; 4]; n];
        assert!(p.validate().is_err(), "11 states must be rejected");
    }

    #[test]
    fn history_probabilities_partition_each_step() {
        let (p, pi) = coin_flip_pomdp();
        let map = enumerate_histories(&p, &pi);
        let mut per_t = vec![0.0; p.horizon];
        for (key, acc) in &map {
            per_t[(key.len() - 2) / 4] += acc.weight;
        }
        for (t, total) in per_t.iter().enumerate() {
            assert!((total - 1.0).abs() < 1e-12, "t={t}: {total}");
        }
        // Blind agents, binary actions: 1 + 4 + 16 histories.
        assert_eq!(map.len(), 21);
    }

    #[test]
    fn enumerated_beliefs_match_the_recursive_filter() {
        for (p, pi) in [coin_flip_pomdp(), fully_observable_pomdp()] {
            let map = enumerate_histories(&p, &pi);
            for (key, acc) in &map {
                let from_traj: Vec<f64> =
                    acc.state_weight.iter().map(|w| w / acc.weight).collect();
                let filtered = filter_belief(&p, key).unwrap();
                for (a, b) in from_traj.iter().zip(&filtered) {
                    assert!((a - b).abs() < 1e-12, "history {key:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn single_state_chain_value_is_exact() {
        // One state, one action each: V(h_t) = horizon - t rewards.
        let p = TabularDecPomdp {
            horizon: 3,
            init: vec![1.0],
            agent_obs: [vec![0], vec![0]],
            n_obs: [1, 1],
            n_actions: [1, 1],
            trans: vec![vec![vec![(0, 1.0)]]],
            reward: vec![vec![0.25]],
        };
        let pi = ReactivePolicy { probs: [vec![vec![1.0]], vec![vec![1.0]]] };
        let rep = unbiasedness_report(&p, &pi, 100, 0, None).unwrap();
        assert_eq!(rep.histories.len(), 3);
        for h in &rep.histories {
            let t = (h.key.len() - 2) / 4;
            let want = 0.25 * (3 - t) as f64;
            assert!((h.exact - want).abs() < 1e-12);
            assert!((h.empirical - want).abs() < 1e-12);
            assert!(h.within);
        }
    }

    #[test]
    fn fully_observable_estimator_is_exact() {
        let (p, pi) = fully_observable_pomdp();
        let rep = unbiasedness_report(&p, &pi, 50, 7, None).unwrap();
        assert!(rep.all_within);
        for h in &rep.histories {
            // Point-mass beliefs: zero sampling error.
            assert!((h.empirical - h.exact).abs() < 1e-12, "history {:?}", h.key);
        }
    }

    #[test]
    fn blind_coin_estimator_is_unbiased() {
        let (p, pi) = coin_flip_pomdp();
        let rep = unbiasedness_report(&p, &pi, 20_000, 41, None).unwrap();
        assert_eq!(rep.histories.len(), 21);
        assert!(
            rep.all_within,
            "failed histories: {:?}",
            rep.histories.iter().filter(|h| !h.within).map(|h| h.key.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn biased_estimator_is_rejected() {
        let (p, pi) = coin_flip_pomdp();
        let rep = unbiasedness_report(&p, &pi, 20_000, 43, Some(0)).unwrap();
        assert!(!rep.all_within, "adding 1{{s = s0}} must break the CI check");
        // Every history keeps tails probability well away from zero,
        // so every single one must fail.
        assert!(rep.histories.iter().all(|h| !h.within));
    }
}

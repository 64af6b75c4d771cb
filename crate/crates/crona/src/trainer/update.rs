//! The joint update. One tape per epoch carries every agent's clipped
//! policy objective, the centralized value loss, and the belief
//! supervision terms; a single backward pass routes
//! -mu * dJ_i + ((1 - mu) / n) * dL into each agent's shared modules
//! while the critic and belief heads receive only their own terms.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::policy::PolicySet;
use crate::tensor::{
    adam_step, clip_global_norm, AdamConfig, AdamState, ParamGroup, Tape, Tensor, VarId,
};

use super::losses::{
    combined_loss_tape, entropy_rows, policy_objective_tape, value_loss_tape,
};
use super::rollout::RolloutBatch;

/// Diagnostics from the first epoch of an update, evaluated at the
/// parameters the rollout was collected with.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    /// Value of the combined loss scalar.
    pub combined: f64,
    /// Mean clipped policy objective across agents.
    pub j_mean: f64,
    pub value_loss: f64,
    /// Summed belief losses (zero when no step had supervision).
    pub belief_loss: f64,
    /// Mean policy entropy across agents and steps.
    pub entropy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub(crate) struct UpdateGraph {
    pub tape: Tape,
    pub total: VarId,
    pub j_terms: Vec<VarId>,
    pub logp_sel: Vec<VarId>,
    pub entropy_means: Vec<VarId>,
    pub value_loss: VarId,
    pub belief_terms: Vec<VarId>,
}

/// Row-concatenate [T_i, cols] parts into one [sum T_i, cols] matrix.
fn concat_rows(tape: &mut Tape, parts: &[VarId], cols: usize) -> VarId {
    if parts.len() == 1 {
        return parts[0];
    }
    let mut flats = Vec::with_capacity(parts.len());
    let mut rows = 0;
    for &p in parts {
        let n = tape.value(p).numel();
        debug_assert_eq!(n % cols, 0);
        rows += n / cols;
        flats.push(tape.reshape(p, &[n]));
    }
    let flat = tape.concat_vec(&flats);
    tape.reshape(flat, &[rows, cols])
}

/// Build the full update graph for one epoch over the batch.
pub(crate) fn build_graph(
    set: &PolicySet,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
) -> Result<UpdateGraph> {
    let n = set.n_agents();
    let t_total = batch.total_steps();
    let d_h = set.cfg.d_h;
    let belief_len = set.cfg.belief_feature_len();
    let mut tape = Tape::new();

    // Per-agent z over the whole batch, replaying each segment with
    // its cached pre-truncation context.
    let mut z_all = Vec::with_capacity(n);
    for i in 0..n {
        let stream = &batch.agents[i];
        let mut seg_z = Vec::with_capacity(batch.segments.len());
        let mut expected = 0usize;
        for seg in &batch.segments {
            if seg.offset != expected {
                return Err(Error::invalid("rollout segments out of order"));
            }
            expected += seg.len;
            let frames = &stream.frames[seg.offset..seg.offset + seg.len];
            let ctx = &seg.ctx[i];
            let mg = set.agents[i].embed_frames(&mut tape, &set.store, frames)?;
            let fused =
                set.agents[i].fuse_frames_with_context(&mut tape, &set.store, mg, frames, ctx)?;
            let z = set.agents[i].z_sequence_range(
                &mut tape,
                &set.store,
                fused,
                ctx.len() + seg.len,
                ctx.len(),
            );
            seg_z.push(z);
        }
        if expected != t_total {
            return Err(Error::invalid("rollout segments do not cover the batch"));
        }
        z_all.push(concat_rows(&mut tape, &seg_z, d_h));
    }

    let mut j_terms = Vec::with_capacity(n);
    let mut logp_sel = Vec::with_capacity(n);
    let mut entropy_means = Vec::with_capacity(n);
    for i in 0..n {
        let stream = &batch.agents[i];
        let beliefs =
            tape.leaf(Tensor::matrix(t_total, belief_len, stream.beliefs.clone())?);
        let logits = set.agents[i].head_logits(&mut tape, &set.store, z_all[i], beliefs);
        let logp = tape.log_softmax(logits);
        let sel = tape.select_per_row(logp, &stream.actions);
        let ent = entropy_rows(&mut tape, logp);
        let j = policy_objective_tape(
            &mut tape,
            sel,
            ent,
            &stream.logp_old,
            &batch.adv,
            cfg.clip_eps,
            cfg.entropy_beta,
        );
        j_terms.push(j);
        logp_sel.push(sel);
        entropy_means.push(tape.mean(ent));
    }

    let mut belief_terms = Vec::new();
    for i in 0..n {
        let stream = &batch.agents[i];
        if stream.n_sup == 0 {
            continue;
        }
        let net = set.beliefs[i]
            .as_ref()
            .ok_or_else(|| Error::invalid("supervision recorded for an agent without a belief net"))?;
        let s = net.cfg.input_hw;
        let x = tape.leaf(Tensor::new(vec![stream.n_sup, 2, s, s], stream.belief_x.clone())?);
        let fwd = net.forward(&mut tape, &set.store, x);
        let goal_star = Tensor::matrix(stream.n_sup, 2, stream.belief_goal.clone())?;
        let cat_star =
            Tensor::matrix(stream.n_sup, set.cfg.n_categories, stream.belief_cat.clone())?;
        belief_terms.push(net.loss(&mut tape, &fwd, &goal_star, &cat_star));
    }

    // Per-step belief rows for the critic, agents side by side.
    let mut critic_beliefs = Vec::with_capacity(t_total * n * belief_len);
    for t in 0..t_total {
        for i in 0..n {
            let row = &batch.agents[i].beliefs[t * belief_len..(t + 1) * belief_len];
            critic_beliefs.extend_from_slice(row);
        }
    }
    let beliefs_all = tape.leaf(Tensor::matrix(t_total, n * belief_len, critic_beliefs)?);
    let states = tape.leaf(Tensor::matrix(t_total, batch.state_len, batch.states.clone())?);
    let v_new = set.critic.forward(&mut tape, &set.store, &z_all, beliefs_all, states)?;
    let value_loss =
        value_loss_tape(&mut tape, v_new, &batch.values_old, &batch.ret, cfg.value_clip);

    let total = combined_loss_tape(
        &mut tape,
        &j_terms,
        value_loss,
        &belief_terms,
        n,
        cfg.mu,
        cfg.belief_weight,
    );
    Ok(UpdateGraph { tape, total, j_terms, logp_sel, entropy_means, value_loss, belief_terms })
}

/// Run `cfg.epochs` clipped-surrogate epochs over the batch and apply
/// Adam steps with per-group learning rates. Aborts without touching
/// parameters on a non-finite loss or gradient.
pub fn joint_update(
    set: &mut PolicySet,
    adam: &mut AdamState,
    acfg: &AdamConfig,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    update_index: usize,
) -> Result<UpdateStats> {
    let n = set.n_agents();
    let mut stats = None;
    for epoch in 0..cfg.epochs {
        let mut g = build_graph(set, batch, cfg)?;
        let combined = g.tape.value(g.total).item();
        if !combined.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss {combined} at update {update_index}, epoch {epoch}"
            )));
        }
        let grads = g.tape.backward(g.total);
        let mut param_grads = grads.into_param_grads(&g.tape, &set.store);
        for (pg, (_, entry)) in param_grads.iter().zip(set.store.iter()) {
            if let Some(t) = pg {
                if t.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!(
                        "non-finite gradient for {} at update {update_index}, epoch {epoch}",
                        entry.name
                    )));
                }
            }
        }
        let grad_norm = clip_global_norm(&mut param_grads, cfg.grad_clip);
        if epoch == 0 {
            let j_mean = g.j_terms.iter().map(|&j| g.tape.value(j).item()).sum::<f64>()
                / n as f64;
            let entropy = g
                .entropy_means
                .iter()
                .map(|&e| g.tape.value(e).item())
                .sum::<f64>()
                / n as f64;
            let belief_loss =
                g.belief_terms.iter().map(|&b| g.tape.value(b).item()).sum::<f64>();
            stats = Some(UpdateStats {
                combined,
                j_mean,
                value_loss: g.tape.value(g.value_loss).item(),
                belief_loss,
                entropy,
                grad_norm,
            });
        }
        adam_step(&mut set.store, &param_grads, adam, acfg, |group| match group {
            ParamGroup::Actor => cfg.actor_lr,
            ParamGroup::Critic => cfg.critic_lr,
        });
    }
    stats.ok_or_else(|| Error::config("epochs must be at least 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, Profile};
    use crate::env::NavEnv;
    use crate::policy::StateSpec;
    use crate::scene::generate::generate;
    use crate::scene::{generate_episodes, EpisodeSpec, Scene, SceneKind, Split};
    use crate::trainer::rollout::Collector;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            scene: SceneKind::Studio,
            preset: Preset::Crona,
            profile: Profile::Smoke,
            episodes: 8,
            rollout_steps: 8,
            seed,
            scene_seed: 3,
            ..TrainConfig::default()
        }
    }

    fn setup(cfg: &TrainConfig) -> (Scene, Vec<EpisodeSpec>, PolicySet) {
        let scene = generate(cfg.scene, cfg.scene_seed).unwrap();
        let mods = cfg.modalities();
        let eps = generate_episodes(&scene, cfg.episodes, mods.len(), cfg.scene_seed).unwrap();
        let train: Vec<EpisodeSpec> =
            eps.into_iter().filter(|e| e.split == Split::Train).collect();
        let env_cfg = cfg.env();
        let env = NavEnv::new(&scene, &train[0], &mods, &env_cfg).unwrap();
        let state_len = StateSpec::for_env(&env).len();
        let set =
            PolicySet::new(cfg.policy().unwrap(), cfg.belief(), &mods, state_len, cfg.seed)
                .unwrap();
        (scene, train, set)
    }

    #[test]
    fn first_epoch_replays_act_time_log_probs() {
        // Before any parameter moves, the update graph must assign the
        // collected actions exactly the log-probabilities they were
        // sampled with; otherwise ratios start away from 1 and the
        // surrogate is biased.
        let cfg = tiny_cfg(11);
        let (scene, train, set) = setup(&cfg);
        let mut col = Collector::new(&scene, train, &cfg, &set).unwrap();
        let batch = col.collect(&set).unwrap();

        let mut g = build_graph(&set, &batch, &cfg).unwrap();
        for (i, &sel) in g.logp_sel.iter().enumerate() {
            let replayed = g.tape.value(sel).data.clone();
            for (t, (a, b)) in replayed.iter().zip(&batch.agents[i].logp_old).enumerate() {
                assert!(
                    (a - b).abs() < 1e-9,
                    "agent {i} step {t}: graph {a} vs act {b}"
                );
            }
        }
    }

    #[test]
    fn replay_holds_across_truncation_boundaries() {
        // Short rollouts truncate episodes mid-flight; the cached
        // context must rebuild identical attention windows in the
        // second rollout's graph.
        let cfg = tiny_cfg(14);
        let (scene, train, set) = setup(&cfg);
        let mut col = Collector::new(&scene, train, &cfg, &set).unwrap();
        let _first = col.collect(&set).unwrap();
        let second = col.collect(&set).unwrap();
        assert!(
            second.segments.iter().any(|s| s.ctx.iter().any(|c| !c.is_empty())),
            "second rollout should continue a truncated episode"
        );

        let mut g = build_graph(&set, &second, &cfg).unwrap();
        for (i, &sel) in g.logp_sel.iter().enumerate() {
            let replayed = g.tape.value(sel).data.clone();
            for (t, (a, b)) in replayed.iter().zip(&second.agents[i].logp_old).enumerate() {
                assert!(
                    (a - b).abs() < 1e-9,
                    "agent {i} step {t}: graph {a} vs act {b}"
                );
            }
        }
    }

    #[test]
    fn mu_one_zeroes_the_critic_head_gradient() {
        let cfg = TrainConfig { mu: 1.0, ..tiny_cfg(17) };
        let (scene, train, set) = setup(&cfg);
        let mut col = Collector::new(&scene, train, &cfg, &set).unwrap();
        let batch = col.collect(&set).unwrap();

        let mut g = build_graph(&set, &batch, &cfg).unwrap();
        let grads = g.tape.backward(g.total);
        let pg = grads.into_param_grads(&g.tape, &set.store);
        for (grad, (_, entry)) in pg.iter().zip(set.store.iter()) {
            if entry.group == ParamGroup::Critic {
                let zero = match grad {
                    None => true,
                    Some(t) => t.data.iter().all(|v| *v == 0.0),
                };
                assert!(zero, "critic head {} received gradient with mu = 1", entry.name);
            }
        }
    }

    #[test]
    fn actors_never_read_the_critic_state() {
        let cfg = tiny_cfg(19);
        let (scene, train, set) = setup(&cfg);
        let mut col = Collector::new(&scene, train, &cfg, &set).unwrap();
        let mut batch = col.collect(&set).unwrap();

        let mut g = build_graph(&set, &batch, &cfg).unwrap();
        let before: Vec<Vec<f64>> =
            g.logp_sel.iter().map(|&s| g.tape.value(s).data.clone()).collect();
        batch.states.iter_mut().for_each(|v| *v = 0.77);
        let mut g = build_graph(&set, &batch, &cfg).unwrap();
        for (i, &sel) in g.logp_sel.iter().enumerate() {
            assert_eq!(
                g.tape.value(sel).data, before[i],
                "state row leaked into agent {i}'s policy"
            );
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        // Optimization sanity: repeated updates on one frozen batch
        // must drive the combined loss down nearly monotonically.
        for seed in [23, 29, 31] {
            let cfg = TrainConfig { epochs: 1, ..tiny_cfg(seed) };
            let (scene, train, mut set) = setup(&cfg);
            let mut col = Collector::new(&scene, train, &cfg, &set).unwrap();
            let batch = col.collect(&set).unwrap();

            let mut adam = AdamState::for_store(&set.store);
            let acfg = AdamConfig::default();
            let mut losses = Vec::with_capacity(51);
            for u in 0..50 {
                let stats = joint_update(&mut set, &mut adam, &acfg, &batch, &cfg, u).unwrap();
                assert!(stats.grad_norm.is_finite());
                losses.push(stats.combined);
            }
            let mut g = build_graph(&set, &batch, &cfg).unwrap();
            losses.push(g.tape.value(g.total).item());

            let decreases =
                losses.windows(2).filter(|w| w[1] < w[0]).count();
            assert!(
                decreases >= 45,
                "seed {seed}: only {decreases}/50 decreases; losses {:?}",
                &losses[..6]
            );
        }
    }
}

use super::*;
use crate::belief::BeliefNetConfig;
use crate::scene::{Category, Scene, Target, SCENE_SCHEMA_VERSION};
use crate::sensors::{stft_spectrogram, synthesize_source, Binaural, StftParams};
use crate::tensor::gradcheck;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg() -> PolicyConfig {
    PolicyConfig { k: 3, ..PolicyConfig::smoke() }
}

/// Synthetic frame with distinct per-seed sensor content.
fn frame(c: &PolicyConfig, m: AgentModalities, seed: u64) -> FrameInput {
    let mut r = rng(seed);
    let audio = m.audio.then(|| {
        let mono = synthesize_source(Category::Sink, 2048, 16_000, seed);
        let wave = Binaural { left: mono.clone(), right: mono, sample_rate: 16_000 };
        let spec = stft_spectrogram(&wave, &StftParams { n_fft: 64, hop: 32, ..Default::default() })
            .unwrap();
        spec.resampled(c.audio_input_hw)
    });
    let depth = m.depth.then(|| {
        let v = c.vision_input_hw;
        (0..v * v).map(|_| r.gen_range(0.0..1.0)).collect()
    });
    let mut goal = vec![0.0; c.n_categories];
    goal[1] = 1.0;
    FrameInput {
        audio,
        depth,
        pose: [0.2, 0.3, 1.0, 0.0, 0.1],
        goal,
        prev_action: [0.0, 1.0, 0.0, 0.0],
    }
}

#[test]
fn embeddings_differ_only_in_pose_slots() {
    let c = cfg();
    let mut store = ParamStore::new();
    let agent =
        AgentPolicy::new(&mut store, &mut rng(1), "a", c, AgentModalities::both()).unwrap();
    let f1 = frame(&c, AgentModalities::both(), 5);
    let mut f2 = f1.clone();
    f2.pose = [0.9, 0.1, 0.0, 1.0, 0.5];
    let e1 = agent.encode_observation(&store, &f1).unwrap();
    let e2 = agent.encode_observation(&store, &f2).unwrap();
    let layout = agent.obs_layout();
    assert_eq!(e1.len(), layout.total());
    assert_eq!(e1[..layout.modality], e2[..layout.modality]);
    assert_ne!(
        e1[layout.modality..layout.modality + layout.pose],
        e2[layout.modality..layout.modality + layout.pose]
    );
    assert_eq!(e1[layout.modality + layout.pose..], e2[layout.modality + layout.pose..]);
}

#[test]
fn cache_holds_exactly_last_k() {
    let mut cache = HistoryCache::new(3);
    for i in 0..7 {
        cache.push(CachedStep {
            mod_goal: vec![i as f64],
            pose: [i as f64; POSE_FEATURES],
            prev_action: [0.0; NUM_ACTIONS],
        });
        assert!(cache.len() <= 3);
    }
    let kept: Vec<f64> = cache.iter().map(|s| s.mod_goal[0]).collect();
    assert_eq!(kept, vec![4.0, 5.0, 6.0]);
    cache.clear();
    assert!(cache.is_empty());
}

#[test]
fn padded_slots_cannot_influence_z() {
    let c = cfg();
    let mut store = ParamStore::new();
    let agent =
        AgentPolicy::new(&mut store, &mut rng(2), "a", c, AgentModalities { depth: true, audio: false })
            .unwrap();
    let h = &agent.history;
    let w = h.window_len();
    let mut r = rng(3);
    let valid = Tensor::randn(&[2, h.d_h], &mut r);

    // Fill padded slots with different garbage and permute them; the
    // window output must not move.
    let run = |garbage: &[f64]| {
        let mut tape = Tape::new();
        let mut data = garbage.to_vec();
        data.extend_from_slice(&valid.data);
        let tokens = tape.leaf(Tensor::matrix(w, h.d_h, data).unwrap());
        let z = h.window(&mut tape, &store, tokens, 2);
        tape.value(z).data.clone()
    };
    let pad = (w - 2) * h.d_h;
    let a = run(&vec![7.0; pad]);
    let mut permuted = vec![-3.0; pad];
    permuted[..h.d_h].fill(11.0);
    let b = run(&permuted);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9, "padded slots leaked into z_h");
    }
}

#[test]
fn graph_and_act_windows_agree() {
    // z from the whole-sequence graph path (select_rows over fused
    // tokens) must equal z from per-window leaf construction, for
    // every step including the partially padded prefix.
    let c = cfg();
    let m = AgentModalities { depth: true, audio: false };
    let mut store = ParamStore::new();
    let agent = AgentPolicy::new(&mut store, &mut rng(4), "a", c, m).unwrap();
    let frames: Vec<FrameInput> = (0..5).map(|i| frame(&c, m, 40 + i)).collect();

    let mut tape = Tape::new();
    let mg = agent.embed_frames(&mut tape, &store, &frames).unwrap();
    let fused = agent.fuse_frames(&mut tape, &store, mg, &frames).unwrap();
    let zs = agent.z_sequence(&mut tape, &store, fused, frames.len());
    let seq = tape.value(zs).data.clone();

    let w = agent.history.window_len();
    let mg_len = agent.history.d_mod_goal;
    for t in 0..frames.len() {
        let n_valid = (t + 1).min(w);
        let mut mgr = vec![0.0; w * mg_len];
        let mut pr = vec![0.0; w * POSE_FEATURES];
        let mut ar = vec![0.0; w * NUM_ACTIONS];
        for s in 0..n_valid {
            let j = t + 1 - n_valid + s;
            let slot = w - n_valid + s;
            let mut row = agent.modality_values(&store, &frames[j]).unwrap();
            row.extend_from_slice(&frames[j].goal);
            mgr[slot * mg_len..(slot + 1) * mg_len].copy_from_slice(&row);
            pr[slot * POSE_FEATURES..(slot + 1) * POSE_FEATURES].copy_from_slice(&frames[j].pose);
            ar[slot * NUM_ACTIONS..(slot + 1) * NUM_ACTIONS]
                .copy_from_slice(&frames[j].prev_action);
        }
        let mut t2 = Tape::new();
        let mgv = t2.leaf(Tensor::matrix(w, mg_len, mgr).unwrap());
        let pv = t2.leaf(Tensor::matrix(w, POSE_FEATURES, pr).unwrap());
        let av = t2.leaf(Tensor::matrix(w, NUM_ACTIONS, ar).unwrap());
        let fusedw = agent.history.fuse(&mut t2, &store, mgv, pv, av);
        let z = agent.history.window(&mut t2, &store, fusedw, n_valid);
        let zw = t2.value(z).data.clone();
        for (i, (x, y)) in seq[t * agent.cfg.d_h..(t + 1) * agent.cfg.d_h]
            .iter()
            .zip(&zw)
            .enumerate()
        {
            assert!((x - y).abs() < 1e-9, "step {t} dim {i}: {x} vs {y}");
        }
    }
}

#[test]
fn context_rows_reproduce_the_full_sequence_tail() {
    // A sequence split into [context | live segment] must produce the
    // same z rows for the live part as the unsplit sequence, because
    // that is exactly the act-time computation after a truncation.
    let c = cfg();
    let m = AgentModalities { depth: true, audio: false };
    let mut store = ParamStore::new();
    let agent = AgentPolicy::new(&mut store, &mut rng(30), "a", c, m).unwrap();
    let frames: Vec<FrameInput> = (0..5).map(|i| frame(&c, m, 300 + i)).collect();
    let split = 2;

    let mut tape = Tape::new();
    let mg = agent.embed_frames(&mut tape, &store, &frames).unwrap();
    let fused = agent.fuse_frames(&mut tape, &store, mg, &frames).unwrap();
    let zs = agent.z_sequence(&mut tape, &store, fused, frames.len());
    let full = tape.value(zs).data.clone();

    let ctx: Vec<CachedStep> = frames[..split]
        .iter()
        .map(|f| {
            let mut mod_goal = agent.modality_values(&store, f).unwrap();
            mod_goal.extend_from_slice(&f.goal);
            CachedStep { mod_goal, pose: f.pose, prev_action: f.prev_action }
        })
        .collect();
    let mut tape = Tape::new();
    let mg = agent.embed_frames(&mut tape, &store, &frames[split..]).unwrap();
    let fused = agent
        .fuse_frames_with_context(&mut tape, &store, mg, &frames[split..], &ctx)
        .unwrap();
    let zs = agent.z_sequence_range(&mut tape, &store, fused, frames.len(), split);
    let tail = tape.value(zs).data.clone();

    assert_eq!(tail.len(), (frames.len() - split) * agent.cfg.d_h);
    for (i, (a, b)) in full[split * agent.cfg.d_h..].iter().zip(&tail).enumerate() {
        assert!((a - b).abs() < 1e-9, "dim {i}: {a} vs {b}");
    }
}

#[test]
fn zero_head_gives_uniform_policy_and_greedy_is_deterministic() {
    let c = cfg();
    let m = AgentModalities { depth: true, audio: false };
    let mut store = ParamStore::new();
    let agent = AgentPolicy::new(&mut store, &mut rng(5), "a", c, m).unwrap();
    let f = frame(&c, m, 9);
    let belief = vec![0.0; c.belief_feature_len()];

    // Zeroed head: exactly uniform probabilities, entropy ln 4.
    for part in ["a/head/w", "a/head/b"] {
        let id = store.find(part).unwrap();
        store.get_mut(id).data.fill(0.0);
    }
    let mut cache = HistoryCache::new(c.k);
    let out = agent.act(&store, &mut cache, &f, &belief, &mut rng(0), false).unwrap();
    assert!((out.entropy - 4.0_f64.ln()).abs() < 1e-12);
    let total: f64 = out.probs.iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    for p in out.probs {
        assert!((p - 0.25).abs() < 1e-12);
    }

    // Fresh (nonzero) head: greedy action is a pure function of the
    // inputs, and entropy stays in [0, ln 4].
    let mut store = ParamStore::new();
    let agent = AgentPolicy::new(&mut store, &mut rng(6), "a", c, m).unwrap();
    let mut picks = Vec::new();
    for trial in 0..3 {
        let mut cache = HistoryCache::new(c.k);
        let out = agent.act(&store, &mut cache, &f, &belief, &mut rng(trial), true).unwrap();
        assert!(out.entropy >= 0.0 && out.entropy <= 4.0_f64.ln() + 1e-12);
        picks.push(out.action);
    }
    assert!(picks.windows(2).all(|p| p[0] == p[1]));
}

#[test]
fn sampling_frequencies_match_probabilities() {
    let logits = [1.2, -0.3, 0.4, -2.0];
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_probs: Vec<f64> = logits.iter().map(|l| l - max - z.ln()).collect();
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();

    let n = 100_000usize;
    let mut counts = [0usize; 4];
    let mut r = rng(7);
    for _ in 0..n {
        let (idx, lp, ent) = sample_categorical(&log_probs, &mut r, false);
        assert!((lp - log_probs[idx]).abs() < 1e-12);
        assert!(ent > 0.0 && ent <= 4.0_f64.ln());
        counts[idx] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let mean = n as f64 * probs[i];
        let sigma = (n as f64 * probs[i] * (1.0 - probs[i])).sqrt();
        let dev = (c as f64 - mean).abs();
        assert!(dev <= 3.0 * sigma, "action {i}: count {c}, expected {mean:.0} +- {sigma:.0}");
    }
}

#[test]
fn critic_zero_head_value_and_arity_error() {
    let mut store = ParamStore::new();
    let critic = Critic::new(&mut store, &mut rng(8), 2, 16, 9, 11, 8);
    let mut r = rng(9);
    let z: Vec<Vec<f64>> = (0..2).map(|_| Tensor::randn(&[16], &mut r).data).collect();
    let b = Tensor::randn(&[18], &mut r).data;
    let s = Tensor::randn(&[11], &mut r).data;

    for part in ["critic/l2/w", "critic/l2/b"] {
        let id = store.find(part).unwrap();
        store.get_mut(id).data.fill(0.0);
    }
    let v = critic.value(&store, &z, &b, &s).unwrap();
    assert_eq!(v, 0.0);

    let err = critic.value(&store, &z[..1], &b, &s);
    assert!(err.is_err(), "agent-count mismatch must error");
}

#[test]
fn critic_gradients_match_finite_differences() {
    // Parameter, state, and z-input gradients all match finite
    // differences; any per-agent down-weighting of the value gradient
    // is the trainer's job, not the critic's.
    let n_agents = 2;
    let d_h = 8;
    let mut store = ParamStore::new();
    let critic = Critic::new(&mut store, &mut rng(10), n_agents, d_h, 5, 6, 8);
    let mut r = rng(11);
    let z0 = Tensor::randn(&[3, d_h], &mut r);
    let z1 = Tensor::randn(&[3, d_h], &mut r);
    let bel = Tensor::randn(&[3, 10], &mut r);
    let st = Tensor::randn(&[3, 6], &mut r);

    let eval = |z0d: &[f64], std: &[f64], store: &ParamStore| {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(3, d_h, z0d.to_vec()).unwrap());
        let b = tape.leaf(z1.clone());
        let bl = tape.leaf(bel.clone());
        let s = tape.leaf(Tensor::matrix(3, 6, std.to_vec()).unwrap());
        let v = critic.forward(&mut tape, store, &[a, b], bl, s).unwrap();
        let total = tape.sum(v);
        tape.value(total).item()
    };

    let mut tape = Tape::new();
    let a = tape.leaf_grad(z0.clone());
    let b = tape.leaf(z1.clone());
    let bl = tape.leaf(bel.clone());
    let s = tape.leaf_grad(st.clone());
    let l1w = store.find("critic/l1/w").unwrap();
    let v = critic.forward(&mut tape, &store, &[a, b], bl, s).unwrap();
    let total = tape.sum(v);
    let grads = tape.backward(total);

    // State rows: plain match.
    let gs = grads.wrt(s).unwrap().data.clone();
    let f_state = |flat: &[f64]| eval(&z0.data, flat, &store);
    let probes: Vec<usize> = (0..gs.len()).step_by(2).collect();
    let rep = gradcheck::check_probes(&f_state, &st.data, &gs, &probes, 1e-5);
    assert!(rep.max_rel_err < 1e-4, "state grad err {}", rep.max_rel_err);

    // z rows: plain match.
    let gz = grads.wrt(a).unwrap().data.clone();
    let f_z = |flat: &[f64]| eval(flat, &st.data, &store);
    for i in (0..gz.len()).step_by(5) {
        let fd = gradcheck::central_diff(&f_z, &z0.data, i, 1e-5);
        assert!(
            gradcheck::rel_err(gz[i], fd) < 1e-4,
            "z grad {i}: analytic {} vs fd {fd}",
            gz[i]
        );
    }

    // Critic parameters: match through into_param_grads.
    let pg = grads.into_param_grads(&tape, &store);
    let gw = pg[l1w.index()].as_ref().unwrap().data.clone();
    let wt = store.get(l1w).clone();
    let f_w = |flat: &[f64]| {
        let mut s2 = store.clone();
        s2.get_mut(l1w).data.copy_from_slice(flat);
        eval(&z0.data, &st.data, &s2)
    };
    let probes: Vec<usize> = (0..25).map(|i| (i * 13) % wt.numel()).collect();
    let rep = gradcheck::check_probes(&f_w, &wt.data, &gw, &probes, 1e-5);
    assert!(rep.max_rel_err < 1e-4, "param grad err {}", rep.max_rel_err);
}

#[test]
fn act_runs_without_any_critic_parameters() {
    // Decentralized execution: build only the actor; the store holds
    // no critic or state-feature parameters at all.
    let c = cfg();
    let m = AgentModalities::both();
    let mut store = ParamStore::new();
    let agent = AgentPolicy::new(&mut store, &mut rng(12), "solo", c, m).unwrap();
    assert!(store.iter().all(|(_, e)| e.name.starts_with("solo/")));
    assert!(store.iter().all(|(_, e)| e.group == ParamGroup::Actor));

    let mut cache = HistoryCache::new(c.k);
    let belief = vec![0.0; c.belief_feature_len()];
    let mut r = rng(13);
    for i in 0..4 {
        let f = frame(&c, m, 60 + i);
        let out = agent.act(&store, &mut cache, &f, &belief, &mut r, false).unwrap();
        assert!(out.log_prob <= 0.0 && out.log_prob.is_finite());
    }
    assert_eq!(cache.len(), c.k.min(4));
}

#[test]
fn critic_owns_only_its_head_and_depends_on_shared_encoders() {
    let c = cfg();
    let mods = [AgentModalities { depth: false, audio: true }, AgentModalities { depth: true, audio: false }];
    let state_len = 13;
    let set = PolicySet::new(c, BeliefNetConfig::smoke(), &mods, state_len, 21).unwrap();

    let critic_params: Vec<&str> = set
        .store
        .iter()
        .filter(|(_, e)| e.group == ParamGroup::Critic)
        .map(|(_, e)| e.name.as_str())
        .collect();
    assert_eq!(critic_params, vec!["critic/l1/w", "critic/l1/b", "critic/l2/w", "critic/l2/b"]);
    assert!(set.beliefs[0].is_some() && set.beliefs[1].is_none());

    // Joint value must move when a shared encoder parameter moves:
    // the critic reads z_h produced by the agents' own parameters.
    let frames: Vec<FrameInput> = (0..2).map(|i| frame(&c, mods[i as usize], 80 + i)).collect();
    let joint = |store: &ParamStore| {
        let mut tape = Tape::new();
        let mut zs = Vec::new();
        for (agent, f) in set.agents.iter().zip(&frames) {
            let mg = agent.embed_frames(&mut tape, store, std::slice::from_ref(f)).unwrap();
            let fused = agent.fuse_frames(&mut tape, store, mg, std::slice::from_ref(f)).unwrap();
            zs.push(agent.z_sequence(&mut tape, store, fused, 1));
        }
        let bl = tape.leaf(Tensor::zeros(&[1, 2 * c.belief_feature_len()]));
        let st = tape.leaf(Tensor::full(&[1, state_len], 0.3));
        let v = set.critic.forward(&mut tape, store, &zs, bl, st).unwrap();
        tape.value(v).item()
    };
    let v0 = joint(&set.store);
    let mut store2 = set.store.clone();
    let pid = store2.find("agent0/audio/p2/w").unwrap();
    for v in store2.get_mut(pid).data.iter_mut() {
        *v += 0.05;
    }
    let v1 = joint(&store2);
    assert!((v0 - v1).abs() > 1e-9, "critic ignored shared encoder parameters");
}

#[test]
fn state_feature_layout_and_ranges() {
    // 6x5 room with border walls, two targets, two agents.
    let mut walls = vec![true; 6 * 5];
    for y in 1..4 {
        for x in 1..5 {
            walls[y * 6 + x] = false;
        }
    }
    let scene = Scene {
        schema_version: SCENE_SCHEMA_VERSION,
        kind: crate::scene::SceneKind::Studio,
        seed: 0,
        width: 6,
        height: 5,
        walls,
        targets: vec![
            Target { category: Category::Picture, cell: (4, 1) },
            Target { category: Category::Chair, cell: (1, 3) },
        ],
    };
    let spec = crate::scene::EpisodeSpec {
        id: 0,
        split: crate::scene::Split::Train,
        starts: vec![
            crate::scene::AgentStart { cell: (1, 1), heading: 0 },
            crate::scene::AgentStart { cell: (3, 3), heading: 2 },
        ],
        targets: vec![0, 1],
        audio_seed: 5,
    };
    let cfg = crate::env::EnvConfig { render_observations: false, ..Default::default() };
    let mods = vec![AgentModalities::both(); 2];
    let mut env = NavEnv::new(&scene, &spec, &mods, &cfg).unwrap();

    let sspec = StateSpec::for_env(&env);
    let row = state_feature(&env);
    assert_eq!(row.len(), sspec.len());
    assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
    let per_target = 3 + sspec.n_categories;
    // Found flags start clear; the time slot starts at zero.
    assert_eq!(row[per_target - 1], 0.0);
    assert_eq!(row[2 * per_target - 1], 0.0);
    assert_eq!(*row.last().unwrap(), 0.0);

    // March agent 0 to the picture and stop on it.
    for _ in 0..3 {
        env.step(&[Action::MoveForward, Action::TurnLeft]).unwrap();
    }
    let out = env.step(&[Action::Stop, Action::TurnLeft]).unwrap();
    assert_eq!(out.newly_found, vec![0]);
    let row = state_feature(&env);
    assert_eq!(row[per_target - 1], 1.0, "found flag must flip");
    assert!(*row.last().unwrap() > 0.0, "time slot must advance");
}

//! Sound synthesis and binaural rendering.
//!
//! Each target category carries a fixed signature tone (carrier plus
//! one harmonic under a repeating attack/decay envelope, with faint
//! seeded noise). Propagation is distance attenuation over geodesic
//! paths, so walls muffle sound, plus interaural level and time
//! differences from the source bearing.

use crate::error::{Error, Result};
use crate::scene::{geodesic::DistanceField, Category, Cell, Pose, Scene};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    pub sample_rate: u32,
    /// Samples rendered per environment step.
    pub samples_per_step: usize,
    pub ear_separation_m: f64,
    pub speed_of_sound: f64,
    /// ILD strength, the eta in gain = g * (1 +/- eta sin(phi)) / 2.
    pub ild_strength: f64,
    /// Per-meter wall/air absorption applied as (1 - a)^d.
    pub absorption: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate: 16_000,
            samples_per_step: 16_000,
            ear_separation_m: 0.2,
            speed_of_sound: 343.0,
            ild_strength: 0.8,
            absorption: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binaural {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub sample_rate: u32,
}

impl Binaural {
    pub fn silence(len: usize, sample_rate: u32) -> Binaural {
        Binaural { left: vec![0.0; len], right: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// Carrier frequency per category, Hz. Spaced so the dominant DFT bin
/// at 16 kHz / 512-point analysis is unique per category.
pub fn carrier_hz(category: Category) -> f64 {
    match category {
        Category::Picture => 3500.0,
        Category::Sink => 1200.0,
        Category::Bed => 300.0,
        Category::Counter => 2500.0,
        Category::Table => 4500.0,
        Category::Chair => 600.0,
        Category::ChestOfDrawers => 900.0,
    }
}

/// Deterministic mono signature for one category: carrier + half-amp
/// harmonic, gated by a 4 Hz ping train (5 ms attack, 60 ms decay),
/// plus low-level seeded noise.
pub fn synthesize_source(
    category: Category,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((category.index() as u64 + 1) << 48));
    let phase0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let f = carrier_hz(category);
    let sr = sample_rate as f64;
    let (period, attack, decay) = (0.25, 0.005, 0.060);
    let mut out = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let t = n as f64 / sr;
        let tp = t % period;
        let env = (tp / attack).min(1.0) * (-tp / decay).exp();
        let tone = (std::f64::consts::TAU * f * t + phase0).sin()
            + 0.3 * (std::f64::consts::TAU * 2.0 * f * t + phase0).sin();
        out.push(env * tone + 0.01 * rng.gen_range(-1.0..1.0));
    }
    out
}

/// Propagation amplitude at geodesic distance d meters.
pub fn distance_gain(d: f64, absorption: f64) -> f64 {
    (1.0 - absorption).powf(d) / (1.0 + d)
}

/// Split a propagation gain into per-ear gains from the bearing.
/// Positive sin(phi) means the source is to the agent's left.
pub fn ear_gains(g: f64, sin_phi: f64, ild_strength: f64) -> (f64, f64) {
    let left = g * (1.0 + ild_strength * sin_phi) / 2.0;
    let right = g * (1.0 - ild_strength * sin_phi) / 2.0;
    (left, right)
}

#[derive(Debug, Clone, Copy)]
pub struct ActiveSource<'a> {
    pub cell: Cell,
    pub samples: &'a [f64],
}

/// Mix all active sources into one binaural frame at the given pose.
/// Each source is attenuated by geodesic distance, panned by ILD, and
/// the far ear is delayed by the ITD in whole samples.
pub fn render_binaural(
    scene: &Scene,
    pose: &Pose,
    sources: &[ActiveSource],
    cfg: &AudioConfig,
) -> Result<Binaural> {
    let mut out = Binaural::silence(cfg.samples_per_step, cfg.sample_rate);
    for src in sources {
        let field = DistanceField::new(scene, src.cell);
        let d = field.get(pose.cell()).ok_or_else(|| {
            Error::invalid(format!("source at {:?} unreachable from agent", src.cell))
        })?;
        mix_source(&mut out, src.samples, d, bearing_sin(pose, src.cell), cfg);
    }
    Ok(out)
}

/// Sine of the source bearing in the agent frame; 0 for a source on
/// the agent's own cell.
pub fn bearing_sin(pose: &Pose, source: Cell) -> f64 {
    let dx = source.0 as f64 - pose.x;
    let dy = source.1 as f64 - pose.y;
    if dx == 0.0 && dy == 0.0 {
        return 0.0;
    }
    (dy.atan2(dx) - pose.heading).sin()
}

/// Lower-level mixer used by the environment with precomputed
/// distances.
pub fn mix_source(out: &mut Binaural, mono: &[f64], d: f64, sin_phi: f64, cfg: &AudioConfig) {
    let g = distance_gain(d, cfg.absorption);
    let (gl, gr) = ear_gains(g, sin_phi, cfg.ild_strength);
    let delay = ((cfg.ear_separation_m * sin_phi.abs() / cfg.speed_of_sound)
        * cfg.sample_rate as f64)
        .round() as usize;
    let n = out.len().min(mono.len());
    // The ear away from the source receives the wavefront late.
    let (lead, lag, g_lead, g_lag) = if sin_phi > 0.0 {
        (&mut out.left, &mut out.right, gl, gr)
    } else {
        (&mut out.right, &mut out.left, gr, gl)
    };
    for i in 0..n {
        lead[i] += g_lead * mono[i];
        if i >= delay {
            lag[i] += g_lag * mono[i - delay];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate::generate;
    use crate::scene::SceneKind;

    fn energy(xs: &[f64]) -> f64 {
        xs.iter().map(|x| x * x).sum()
    }

    #[test]
    fn synthesis_is_deterministic_and_respects_duration() {
        let a = synthesize_source(Category::Sink, 400, 16_000, 9);
        let b = synthesize_source(Category::Sink, 400, 16_000, 9);
        assert_eq!(a, b);
        assert_ne!(a, synthesize_source(Category::Sink, 400, 16_000, 10));
        assert!(synthesize_source(Category::Bed, 0, 16_000, 1).is_empty());
        assert!(a.iter().all(|x| x.is_finite() && x.abs() < 1.5));
    }

    #[test]
    fn no_sources_means_silence() {
        let scene = generate(SceneKind::Studio, 0).unwrap();
        let pose = Pose::at_cell(scene.navigable_cells()[0], 0, 0);
        let cfg = AudioConfig { samples_per_step: 64, ..Default::default() };
        let out = render_binaural(&scene, &pose, &[], &cfg).unwrap();
        assert!(out.left.iter().chain(&out.right).all(|x| *x == 0.0));
    }

    #[test]
    fn dead_ahead_source_gives_identical_channels() {
        let scene = generate(SceneKind::Corridor, 0).unwrap();
        // Heading +x with the source straight ahead on the same row.
        let pose = Pose::at_cell((2, 2), 0, 0);
        let mono: Vec<f64> = (0..128).map(|i| (i as f64 * 0.11).sin()).collect();
        let cfg = AudioConfig { samples_per_step: 128, ..Default::default() };
        let src = ActiveSource { cell: (5, 2), samples: &mono };
        let out = render_binaural(&scene, &pose, &[src], &cfg).unwrap();
        assert_eq!(out.left, out.right);
    }

    #[test]
    fn distance_three_gain_matches_closed_form() {
        assert!((distance_gain(3.0, 0.1) - 0.25 * 0.9f64.powi(3)).abs() < 1e-12);
        assert!((distance_gain(0.0, 0.1) - 1.0).abs() < 1e-15);

        let scene = generate(SceneKind::Corridor, 0).unwrap();
        let pose = Pose::at_cell((2, 2), 0, 0);
        let mono = vec![1.0; 32];
        let cfg = AudioConfig { samples_per_step: 32, ..Default::default() };
        // Straight ahead at geodesic distance 3: phi = 0, both ears get g/2.
        let src = ActiveSource { cell: (5, 2), samples: &mono };
        let out = render_binaural(&scene, &pose, &[src], &cfg).unwrap();
        let expect = 0.25 * 0.9f64.powi(3) / 2.0;
        assert!((out.left[0] - expect).abs() < 1e-12, "left {} vs {expect}", out.left[0]);
    }

    #[test]
    fn channel_energy_ratio_follows_ild() {
        let scene = generate(SceneKind::Studio, 0).unwrap();
        // Source due +y of the agent while it faces +x: phi = pi/2.
        let pose = Pose::at_cell((2, 1), 0, 0);
        let mono: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
        let cfg = AudioConfig { samples_per_step: 256, ..Default::default() };
        let src = ActiveSource { cell: (2, 3), samples: &mono };
        let out = render_binaural(&scene, &pose, &[src], &cfg).unwrap();
        let want = ((1.0_f64 + 0.8) / (1.0 - 0.8)).powi(2);
        let got = energy(&out.left) / energy(&out.right);
        // ITD truncation drops a few samples from the lagging ear.
        assert!((got / want - 1.0).abs() < 0.05, "ratio {got} vs {want}");
        assert!(energy(&out.left) > energy(&out.right));
    }

    #[test]
    fn mirrored_bearing_swaps_channels_exactly() {
        let mono: Vec<f64> = (0..200).map(|i| ((i * i) as f64 * 0.01).sin()).collect();
        let cfg = AudioConfig { samples_per_step: 200, ..Default::default() };
        for sin_phi in [0.3, 0.77, 1.0] {
            let mut a = Binaural::silence(200, cfg.sample_rate);
            let mut b = Binaural::silence(200, cfg.sample_rate);
            mix_source(&mut a, &mono, 2.0, sin_phi, &cfg);
            mix_source(&mut b, &mono, 2.0, -sin_phi, &cfg);
            assert_eq!(a.left, b.right);
            assert_eq!(a.right, b.left);
        }
    }

    #[test]
    fn farther_sources_are_never_louder() {
        let mono: Vec<f64> = (0..300).map(|i| (i as f64 * 0.21).cos()).collect();
        let cfg = AudioConfig { samples_per_step: 300, ..Default::default() };
        let mut prev = f64::INFINITY;
        for d in [0.0, 1.0, 2.0, 4.0, 7.0, 12.0] {
            let mut out = Binaural::silence(300, cfg.sample_rate);
            mix_source(&mut out, &mono, d, 0.4, &cfg);
            let e = energy(&out.left) + energy(&out.right);
            assert!(e <= prev + 1e-12, "distance {d} louder: {e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn itd_delays_the_far_ear_in_whole_samples() {
        // sin_phi = 1: delay = round(0.2 / 343 * 16000) = 9 samples.
        let mut mono = vec![0.0; 64];
        mono[0] = 1.0;
        let cfg = AudioConfig { samples_per_step: 64, ..Default::default() };
        let mut out = Binaural::silence(64, cfg.sample_rate);
        mix_source(&mut out, &mono, 0.0, 1.0, &cfg);
        assert!(out.left[0] > 0.0);
        assert_eq!(out.right[0], 0.0);
        assert!(out.right[9] > 0.0, "expected impulse at sample 9");
    }

    #[test]
    fn walls_attenuate_via_geodesic_distance() {
        // Corridor scene: rooms at both ends. A source in the far room
        // is geodesically much farther than straight-line distance.
        let scene = generate(SceneKind::Corridor, 0).unwrap();
        let pose = Pose::at_cell((2, 1), 0, 0);
        let mono = vec![0.5; 64];
        let cfg = AudioConfig { samples_per_step: 64, ..Default::default() };
        let near = ActiveSource { cell: (2, 5), samples: &mono };
        let far = ActiveSource { cell: (22, 1), samples: &mono };
        let e_near = {
            let o = render_binaural(&scene, &pose, &[near], &cfg).unwrap();
            energy(&o.left) + energy(&o.right)
        };
        let e_far = {
            let o = render_binaural(&scene, &pose, &[far], &cfg).unwrap();
            energy(&o.left) + energy(&o.right)
        };
        assert!(e_far < e_near / 10.0, "far {e_far} vs near {e_near}");
    }
}

//! Modality encoders and per-step input preprocessing. Raw sensor
//! output is resampled into fixed network inputs once, at observation
//! time; the conv stacks then run either on throwaway tapes (rollout)
//! or inside the update graph (training).

use crate::env::{AgentModalities, Observation, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{ConvTrunk, ConvTrunkConfig, Linear};
use crate::scene::Pose;
use crate::sensors::resize_bilinear;
use crate::tensor::{ParamGroup, ParamStore, Tape, VarId};
use rand::Rng;

use super::PolicyConfig;

pub const POSE_FEATURES: usize = 5;

/// Normalized pose row: x and y over the scene extent, heading as
/// cos/sin, elapsed fraction of the horizon.
pub fn pose_features(pose: &Pose, width: usize, height: usize, horizon: usize) -> [f64; 5] {
    let wd = (width.saturating_sub(1)).max(1) as f64;
    let hd = (height.saturating_sub(1)).max(1) as f64;
    [
        pose.x / wd,
        pose.y / hd,
        pose.heading.cos(),
        pose.heading.sin(),
        pose.t as f64 / horizon.max(1) as f64,
    ]
}

/// Preprocessed inputs for one agent at one step: everything the
/// networks need, with sensors already resampled to model resolution.
#[derive(Debug, Clone)]
pub struct FrameInput {
    /// [2, S, S] flat, present for audio agents.
    pub audio: Option<Vec<f64>>,
    /// [1, V, V] flat, depth normalized by max depth.
    pub depth: Option<Vec<f64>>,
    pub pose: [f64; POSE_FEATURES],
    pub goal: Vec<f64>,
    /// One-hot of the action taken at the previous step; zeros at t=0.
    pub prev_action: [f64; NUM_ACTIONS],
}

/// Resample an observation into model inputs. `prev_action` is None at
/// the first step of an episode; `max_depth` is the sensor ceiling the
/// depth values are normalized by.
pub fn preprocess_observation(
    cfg: &PolicyConfig,
    modalities: AgentModalities,
    obs: &Observation,
    prev_action: Option<usize>,
    max_depth: f64,
    scene_w: usize,
    scene_h: usize,
    horizon: usize,
) -> Result<FrameInput> {
    let audio = if modalities.audio {
        let spec = obs
            .spectrogram
            .as_ref()
            .ok_or_else(|| Error::invalid("audio modality declared but no spectrogram rendered"))?;
        Some(spec.resampled(cfg.audio_input_hw))
    } else {
        None
    };
    let depth = if modalities.depth {
        let img = obs
            .depth
            .as_ref()
            .ok_or_else(|| Error::invalid("depth modality declared but no depth image rendered"))?;
        let v = cfg.vision_input_hw;
        let ceil = max_depth.max(1e-9);
        let norm: Vec<f64> = img.values.iter().map(|d| d / ceil).collect();
        Some(resize_bilinear(&norm, img.height, img.width, v, v))
    } else {
        None
    };
    let mut prev = [0.0; NUM_ACTIONS];
    if let Some(a) = prev_action {
        prev[a] = 1.0;
    }
    Ok(FrameInput {
        audio,
        depth,
        pose: pose_features(&obs.pose, scene_w, scene_h, horizon),
        goal: obs.goal.clone(),
        prev_action: prev,
    })
}

/// Three plain conv layers over the spectrogram, then a two-layer
/// projection to the modality embedding.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    c1: crate::nn::Conv2d,
    c2: crate::nn::Conv2d,
    c3: crate::nn::Conv2d,
    p1: Linear,
    p2: Linear,
    pub input_hw: usize,
    pub flat: usize,
}

impl AudioEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        cfg: &PolicyConfig,
    ) -> AudioEncoder {
        let (a, b) = cfg.audio_channels;
        let gain = 2.0_f64.sqrt();
        let c1 = crate::nn::Conv2d::new(store, rng, group, &format!("{name}/c1"), 2, a, 5, 2, 0, gain);
        let c2 = crate::nn::Conv2d::new(store, rng, group, &format!("{name}/c2"), a, b, 3, 2, 0, gain);
        let c3 = crate::nn::Conv2d::new(store, rng, group, &format!("{name}/c3"), b, b, 3, 1, 0, gain);
        let s = cfg.audio_input_hw;
        let d1 = c1.dims(s, s);
        let d2 = c2.dims(d1.out_h(), d1.out_w());
        let d3 = c3.dims(d2.out_h(), d2.out_w());
        assert!(d3.out_h() >= 1, "audio input {s} too small for the conv stack");
        let flat = b * d3.out_h() * d3.out_w();
        AudioEncoder {
            c1,
            c2,
            c3,
            p1: Linear::new(store, rng, group, &format!("{name}/p1"), flat, cfg.encoder_hidden, gain),
            p2: Linear::new(
                store, rng, group,
                &format!("{name}/p2"),
                cfg.encoder_hidden,
                cfg.embedding_size,
                1.0,
            ),
            input_hw: s,
            flat,
        }
    }

    /// x: [N, 2, S, S] -> [N, embedding].
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let n = tape.shape(x)[0];
        let s = self.input_hw;
        let (y, h, w) = self.c1.forward(tape, store, x, s, s);
        let y = tape.relu(y);
        let (y, h, w) = self.c2.forward(tape, store, y, h, w);
        let y = tape.relu(y);
        let (y, _, _) = self.c3.forward(tape, store, y, h, w);
        let y = tape.reshape(y, &[n, self.flat]);
        let y = self.p1.forward(tape, store, y);
        let y = tape.relu(y);
        self.p2.forward(tape, store, y)
    }
}

/// Residual trunk over the depth image with the same projection shape
/// as the audio path.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    trunk: ConvTrunk,
    p1: Linear,
    p2: Linear,
}

impl VisionEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: ParamGroup,
        name: &str,
        cfg: &PolicyConfig,
    ) -> VisionEncoder {
        let trunk = ConvTrunk::new(
            store,
            rng,
            group,
            &format!("{name}/trunk"),
            ConvTrunkConfig {
                in_channels: 1,
                input_hw: cfg.vision_input_hw,
                base_channels: cfg.vision_base_channels,
                blocks_per_stage: cfg.vision_blocks_per_stage,
            },
        );
        let flat = trunk.cfg.out_dim();
        let gain = 2.0_f64.sqrt();
        VisionEncoder {
            p1: Linear::new(store, rng, group, &format!("{name}/p1"), flat, cfg.encoder_hidden, gain),
            p2: Linear::new(
                store, rng, group,
                &format!("{name}/p2"),
                cfg.encoder_hidden,
                cfg.embedding_size,
                1.0,
            ),
            trunk,
        }
    }

    /// x: [N, 1, V, V] -> [N, embedding].
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let y = self.trunk.forward(tape, store, x);
        let y = self.p1.forward(tape, store, y);
        let y = tape.relu(y);
        self.p2.forward(tape, store, y)
    }
}

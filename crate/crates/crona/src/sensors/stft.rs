//! Magnitude spectrograms over short-time Fourier frames.
//!
//! Frame m covers samples [m*hop, m*hop + n_fft); the one-sided
//! magnitude keeps K = n_fft/2 + 1 bins, giving F = (L - n_fft)/hop + 1
//! frames. The FFT path must agree with a naive DFT to 1e-9.

use super::audio::Binaural;
use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams { n_fft: 512, hop: 256, window: WindowKind::Hann }
    }
}

impl StftParams {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        (len - self.n_fft) / self.hop + 1
    }

    pub fn window_values(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Rectangular => vec![1.0; self.n_fft],
            WindowKind::Hann => (0..self.n_fft)
                .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / self.n_fft as f64).cos()))
                .collect(),
        }
    }
}

/// Two-channel magnitude spectrogram, shape [2, K, F] with frequency
/// as the row axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    /// Layout: channel-major, then bin, then frame.
    pub magnitudes: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, ch: usize, k: usize, f: usize) -> f64 {
        self.magnitudes[(ch * self.bins + k) * self.frames + f]
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.bins * self.frames;
        &self.magnitudes[ch * n..(ch + 1) * n]
    }

    /// Both channels bilinearly resampled to a square edge, flat
    /// [2, hw, hw] layout; the network input format.
    pub fn resampled(&self, hw: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * hw * hw);
        for ch in 0..2 {
            out.extend(crate::sensors::image::resize_bilinear(
                self.channel(ch),
                self.bins,
                self.frames,
                hw,
                hw,
            ));
        }
        out
    }

    /// Dominant bin of a channel summed over frames.
    pub fn peak_bin(&self, ch: usize) -> usize {
        let mut best = 0;
        let mut best_v = f64::MIN;
        for k in 0..self.bins {
            let v: f64 = (0..self.frames).map(|f| self.get(ch, k, f)).sum();
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        best
    }
}

pub fn stft_spectrogram(wave: &Binaural, params: &StftParams) -> Result<Spectrogram> {
    if wave.len() < params.n_fft {
        return Err(Error::invalid(format!(
            "waveform length {} shorter than n_fft {}",
            wave.len(),
            params.n_fft
        )));
    }
    let bins = params.bins();
    let frames = params.frames(wave.len());
    let window = params.window_values();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(params.n_fft);
    let mut magnitudes = Vec::with_capacity(2 * bins * frames);
    let mut buf = vec![Complex::new(0.0, 0.0); params.n_fft];
    for channel in [&wave.left, &wave.right] {
        // Compute frame-major, then transpose to bin-major.
        let mut frame_major = vec![0.0; frames * bins];
        for m in 0..frames {
            let start = m * params.hop;
            for n in 0..params.n_fft {
                buf[n] = Complex::new(channel[start + n] * window[n], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..bins {
                frame_major[m * bins + k] = buf[k].norm();
            }
        }
        for k in 0..bins {
            for m in 0..frames {
                magnitudes.push(frame_major[m * bins + k]);
            }
        }
    }
    Ok(Spectrogram { bins, frames, magnitudes })
}

//! Small image utilities: bilinear resize for encoder inputs and PGM
//! dumps for the replay CLI.

use crate::error::Result;
use std::io::Write;
use std::path::Path;

/// Bilinear resample with half-pixel centers; exact pass-through when
/// the size is unchanged.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "source size mismatch");
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Binary PGM (P5), scaling [min, max] of the data onto 0..=255.
pub fn save_pgm(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(data.len(), h * w);
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut file = std::fs::File::create(path)?;
    write!(file, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> =
        data.iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    file.write_all(&bytes)?;
    Ok(())
}

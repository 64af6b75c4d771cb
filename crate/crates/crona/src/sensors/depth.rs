//! Depth imaging by grid raycasting.
//!
//! A narrow horizontal fan of rays is cast with a voxel-traversal walk;
//! the reported range is the wall entry distance plus half a cell, so a
//! ray straight at a wall reads the distance to that wall cell's
//! center. The 2D world has no vertical structure, so image rows all
//! repeat the same horizontal scan.

use crate::scene::{Pose, Scene};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub max_depth: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig { width: 16, height: 16, fov_deg: 10.0, max_depth: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, meters, already clipped to [0, max_depth].
    pub values: Vec<f64>,
}

pub fn render_depth(scene: &Scene, pose: &Pose, cfg: &DepthConfig) -> DepthImage {
    let fov = cfg.fov_deg.to_radians();
    let mut scan = Vec::with_capacity(cfg.width);
    for j in 0..cfg.width {
        // Left edge of the image is the left edge of the fan.
        let offset = fov / 2.0 - fov * (j as f64 + 0.5) / cfg.width as f64;
        let angle = pose.heading + offset;
        scan.push(cast_ray(scene, pose.x, pose.y, angle, cfg.max_depth));
    }
    let mut values = Vec::with_capacity(cfg.width * cfg.height);
    for _ in 0..cfg.height {
        values.extend_from_slice(&scan);
    }
    DepthImage { width: cfg.width, height: cfg.height, values }
}

/// Distance to the first blocked cell along the ray (entry point plus
/// half a cell), clipped to max_depth. Cell (cx, cy) spans
/// [cx - 0.5, cx + 0.5) on each axis.
pub fn cast_ray(scene: &Scene, px: f64, py: f64, angle: f64, max_depth: f64) -> f64 {
    let dx = angle.cos();
    let dy = angle.sin();
    let mut cx = px.round() as isize;
    let mut cy = py.round() as isize;

    let step_x: isize = if dx > 0.0 { 1 } else { -1 };
    let step_y: isize = if dy > 0.0 { 1 } else { -1 };
    // Ray parameter t at the next x/y cell boundary and per-cell increments.
    let mut t_max_x = if dx != 0.0 {
        let boundary = cx as f64 + 0.5 * step_x as f64;
        (boundary - px) / dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy != 0.0 {
        let boundary = cy as f64 + 0.5 * step_y as f64;
        (boundary - py) / dy
    } else {
        f64::INFINITY
    };
    let t_delta_x = if dx != 0.0 { (1.0 / dx).abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { (1.0 / dy).abs() } else { f64::INFINITY };

    loop {
        let t_entry = if t_max_x < t_max_y {
            cx += step_x;
            let t = t_max_x;
            t_max_x += t_delta_x;
            t
        } else {
            cy += step_y;
            let t = t_max_y;
            t_max_y += t_delta_y;
            t
        };
        if t_entry > max_depth {
            return max_depth;
        }
        if scene.blocked(cx, cy) {
            return (t_entry + 0.5).min(max_depth);
        }
    }
}

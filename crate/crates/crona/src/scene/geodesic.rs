//! Shortest-path distances on the wall grid (4-connected BFS).

use super::{Cell, Scene, CELL_SIZE_M};
use std::collections::VecDeque;

const UNREACHED: u32 = u32::MAX;

/// BFS distance from a single source to every navigable cell.
#[derive(Debug, Clone)]
pub struct DistanceField {
    width: usize,
    dist: Vec<u32>,
    pub source: Cell,
}

impl DistanceField {
    pub fn new(scene: &Scene, source: Cell) -> DistanceField {
        let mut dist = vec![UNREACHED; scene.width * scene.height];
        let mut queue = VecDeque::new();
        if scene.navigable(source) {
            dist[source.1 * scene.width + source.0] = 0;
            queue.push_back(source);
        }
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[y * scene.width + x];
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if scene.blocked(nx, ny) {
                    continue;
                }
                let idx = ny as usize * scene.width + nx as usize;
                if dist[idx] == UNREACHED {
                    dist[idx] = d + 1;
                    queue.push_back((nx as usize, ny as usize));
                }
            }
        }
        DistanceField { width: scene.width, dist, source }
    }

    /// Distance in meters, None if unreachable.
    pub fn get(&self, c: Cell) -> Option<f64> {
        match self.dist[c.1 * self.width + c.0] {
            UNREACHED => None,
            d => Some(d as f64 * CELL_SIZE_M),
        }
    }

    pub fn reachable(&self, c: Cell) -> bool {
        self.dist[c.1 * self.width + c.0] != UNREACHED
    }
}

pub fn geodesic(scene: &Scene, a: Cell, b: Cell) -> Option<f64> {
    DistanceField::new(scene, a).get(b)
}

//! Deterministic scene construction for the five world kinds.
//!
//! Layouts are hand-shaped per kind (room counts and rough footprints
//! are part of the task definition); the seed only moves doors and
//! target cells. Every generator ends with a reachability filter so a
//! scene can never ship disconnected navigable space.

use super::geodesic::DistanceField;
use super::{Scene, SceneKind, Target, SCENE_SCHEMA_VERSION};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn generate(kind: SceneKind, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((kind as u64 + 1) << 32));
    let mut scene = match kind {
        SceneKind::Studio => studio(seed),
        SceneKind::Corridor => corridor(seed),
        SceneKind::Apartment => apartment(seed, &mut rng),
        SceneKind::Ranch => ranch(seed, &mut rng),
        SceneKind::Maze => maze(seed, &mut rng),
    };
    keep_largest_component(&mut scene);
    place_targets(&mut scene, &mut rng)?;
    Ok(scene)
}

struct Grid {
    width: usize,
    height: usize,
    walls: Vec<bool>,
}

impl Grid {
    fn solid(width: usize, height: usize) -> Grid {
        Grid { width, height, walls: vec![true; width * height] }
    }

    fn carve(&mut self, x: usize, y: usize) {
        self.walls[y * self.width + x] = false;
    }

    fn carve_rect(&mut self, x0: usize, x1: usize, y0: usize, y1: usize) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.carve(x, y);
            }
        }
    }

    fn into_scene(self, kind: SceneKind, seed: u64) -> Scene {
        Scene {
            schema_version: SCENE_SCHEMA_VERSION,
            kind,
            seed,
            width: self.width,
            height: self.height,
            walls: self.walls,
            targets: vec![],
        }
    }
}

/// Single room, 5x4 navigable.
fn studio(seed: u64) -> Scene {
    let mut g = Grid::solid(7, 6);
    g.carve_rect(1, 5, 1, 4);
    g.into_scene(SceneKind::Studio, seed)
}

/// Two rooms joined by a long corridor.
fn corridor(seed: u64) -> Scene {
    let mut g = Grid::solid(26, 9);
    g.carve_rect(1, 6, 1, 7);
    g.carve_rect(19, 24, 1, 7);
    g.carve_rect(7, 18, 4, 4);
    g.into_scene(SceneKind::Corridor, seed)
}

/// Living room, bedroom, and two bathrooms off a shared wall.
fn apartment(seed: u64, rng: &mut ChaCha8Rng) -> Scene {
    let mut g = Grid::solid(15, 11);
    g.carve_rect(1, 6, 1, 9); // living
    g.carve_rect(8, 13, 1, 4); // bedroom
    g.carve_rect(8, 10, 6, 9); // bath 1
    g.carve_rect(12, 13, 6, 9); // bath 2
    g.carve(7, rng.gen_range(1..=4)); // living <-> bedroom
    g.carve(7, rng.gen_range(6..=9)); // living <-> bath 1
    g.carve(11, rng.gen_range(6..=9)); // bath 1 <-> bath 2
    g.into_scene(SceneKind::Apartment, seed)
}

/// Five bedrooms over a corridor, living room and two baths below.
fn ranch(seed: u64, rng: &mut ChaCha8Rng) -> Scene {
    let mut g = Grid::solid(21, 13);
    g.carve_rect(1, 19, 6, 6);
    for k in 0..5 {
        let x0 = 1 + 4 * k;
        g.carve_rect(x0, x0 + 2, 1, 4);
        g.carve(x0 + rng.gen_range(0..3), 5);
    }
    g.carve_rect(1, 9, 8, 11); // living
    g.carve_rect(11, 14, 8, 11); // bath 1
    g.carve_rect(16, 19, 8, 11); // bath 2
    g.carve(rng.gen_range(1..=9), 7);
    g.carve(rng.gen_range(11..=14), 7);
    g.carve(rng.gen_range(16..=19), 7);
    g.into_scene(SceneKind::Ranch, seed)
}

/// 6x5 lattice of rooms connected by a random spanning tree plus a
/// few extra doors for loops.
fn maze(seed: u64, rng: &mut ChaCha8Rng) -> Scene {
    const COLS: usize = 6;
    const ROWS: usize = 5;
    let mut g = Grid::solid(COLS * 6 + 1, ROWS * 5 + 1);
    for j in 0..ROWS {
        for i in 0..COLS {
            g.carve_rect(1 + 6 * i, 5 + 6 * i, 1 + 5 * j, 4 + 5 * j);
        }
    }

    // Randomized DFS over the room lattice.
    let mut visited = vec![false; COLS * ROWS];
    let mut stack = vec![rng.gen_range(0..COLS * ROWS)];
    visited[stack[0]] = true;
    let mut tree_edges = Vec::new();
    while let Some(&room) = stack.last() {
        let (i, j) = (room % COLS, room / COLS);
        let mut options = Vec::new();
        for (di, dj) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if ni < 0 || nj < 0 || ni as usize >= COLS || nj as usize >= ROWS {
                continue;
            }
            let n = nj as usize * COLS + ni as usize;
            if !visited[n] {
                options.push(n);
            }
        }
        if options.is_empty() {
            stack.pop();
            continue;
        }
        let next = options[rng.gen_range(0..options.len())];
        visited[next] = true;
        tree_edges.push((room, next));
        stack.push(next);
    }
    // A handful of extra doors so the maze has cycles.
    for _ in 0..8 {
        let room = rng.gen_range(0..COLS * ROWS);
        let (i, j) = (room % COLS, room / COLS);
        if i + 1 < COLS && rng.gen_bool(0.5) {
            tree_edges.push((room, room + 1));
        } else if j + 1 < ROWS {
            tree_edges.push((room, room + COLS));
        }
    }
    for (a, b) in tree_edges {
        let (ai, aj) = (a % COLS, a / COLS);
        let (bi, bj) = (b % COLS, b / COLS);
        if aj == bj {
            // Horizontal neighbors: door in the shared vertical wall.
            let x = 6 * ai.max(bi);
            let y = 1 + 5 * aj + rng.gen_range(0..4);
            g.carve(x, y);
        } else {
            let y = 5 * aj.max(bj);
            let x = 1 + 6 * ai + rng.gen_range(0..5);
            g.carve(x, y);
        }
    }
    g.into_scene(SceneKind::Maze, seed)
}

/// Flood-fill from an arbitrary navigable cell and wall off anything
/// the fill does not reach.
fn keep_largest_component(scene: &mut Scene) {
    let cells = scene.navigable_cells();
    if cells.is_empty() {
        return;
    }
    let mut best: Option<Vec<bool>> = None;
    let mut best_count = 0usize;
    let mut seen = vec![false; scene.width * scene.height];
    for &c in &cells {
        if seen[c.1 * scene.width + c.0] {
            continue;
        }
        let field = DistanceField::new(scene, c);
        let mut mask = vec![false; scene.width * scene.height];
        let mut count = 0;
        for &d in &cells {
            if field.reachable(d) {
                mask[d.1 * scene.width + d.0] = true;
                seen[d.1 * scene.width + d.0] = true;
                count += 1;
            }
        }
        if count > best_count {
            best_count = count;
            best = Some(mask);
        }
    }
    if let Some(mask) = best {
        for i in 0..scene.walls.len() {
            if !mask[i] {
                scene.walls[i] = true;
            }
        }
    }
}

/// Category-specific pairwise spacing applied while sampling target
/// cells (meters, geodesic).
fn target_spacing(kind: SceneKind) -> (f64, f64) {
    match kind {
        SceneKind::Studio | SceneKind::Corridor => (0.0, f64::INFINITY),
        SceneKind::Apartment | SceneKind::Ranch => (2.0, f64::INFINITY),
        SceneKind::Maze => (3.0, 10.0),
    }
}

fn place_targets(scene: &mut Scene, rng: &mut ChaCha8Rng) -> Result<()> {
    let categories = scene.kind.target_categories();
    let cells = scene.navigable_cells();
    let (min_sep, max_sep) = target_spacing(scene.kind);
    const ATTEMPTS: usize = 4000;
    'outer: for _ in 0..ATTEMPTS {
        let mut placed: Vec<Target> = Vec::with_capacity(categories.len());
        let mut fields: Vec<DistanceField> = Vec::new();
        for &category in categories {
            let mut ok = None;
            for _ in 0..ATTEMPTS {
                let cell = cells[rng.gen_range(0..cells.len())];
                if placed.iter().any(|t| t.cell == cell) {
                    continue;
                }
                let fits = fields.iter().all(|f| match f.get(cell) {
                    Some(d) => d >= min_sep && d <= max_sep,
                    None => false,
                });
                if fits {
                    ok = Some(cell);
                    break;
                }
            }
            match ok {
                Some(cell) => {
                    fields.push(DistanceField::new(scene, cell));
                    placed.push(Target { category, cell });
                }
                None => continue 'outer,
            }
        }
        scene.targets = placed;
        return Ok(());
    }
    Err(Error::invalid(format!(
        "could not place {} targets in {} scene (seed {})",
        categories.len(),
        scene.kind,
        scene.seed
    )))
}

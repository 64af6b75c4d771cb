//! Procedural 2D grid worlds.
//!
//! A scene is a wall grid with 1 m cells plus a fixed set of sounding
//! targets. Five generator kinds span a tiny single-room studio up to a
//! multi-room maze. Episodes pick agent starts (and a target subset)
//! under per-kind distance constraints; scenes themselves never change
//! between episodes, matching the fixed-world setting the policies are
//! meant to memorize.

pub mod episodes;
pub mod files;
pub mod generate;
pub mod geodesic;

pub use episodes::{generate_episodes, verify_episode, AgentStart, EpisodeConstraints, EpisodeSpec, Split};
pub use files::{load_dataset, save_dataset, Dataset};
pub use geodesic::{geodesic, DistanceField};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

/// Grid cell as (x, y); x grows east, y grows north.
pub type Cell = (usize, usize);

pub const CELL_SIZE_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Studio,
    Corridor,
    Apartment,
    Ranch,
    Maze,
}

impl SceneKind {
    pub fn all() -> [SceneKind; 5] {
        [
            SceneKind::Studio,
            SceneKind::Corridor,
            SceneKind::Apartment,
            SceneKind::Ranch,
            SceneKind::Maze,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Studio => "studio",
            SceneKind::Corridor => "corridor",
            SceneKind::Apartment => "apartment",
            SceneKind::Ranch => "ranch",
            SceneKind::Maze => "maze",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "studio" => Ok(SceneKind::Studio),
            "corridor" => Ok(SceneKind::Corridor),
            "apartment" => Ok(SceneKind::Apartment),
            "ranch" => Ok(SceneKind::Ranch),
            "maze" => Ok(SceneKind::Maze),
            other => Err(Error::config(format!("unknown scene kind '{other}'"))),
        }
    }

    /// Episode step budget per kind.
    pub fn horizon(&self) -> usize {
        match self {
            SceneKind::Studio => 70,
            SceneKind::Corridor => 150,
            SceneKind::Apartment => 500,
            SceneKind::Ranch => 1000,
            SceneKind::Maze => 1500,
        }
    }

    /// Default dataset size (train + validation together).
    pub fn default_episode_count(&self) -> usize {
        match self {
            SceneKind::Studio => 220,
            SceneKind::Corridor => 218,
            SceneKind::Apartment => 230,
            SceneKind::Ranch => 228,
            SceneKind::Maze => 252,
        }
    }

    /// Target categories this kind places, in placement order.
    pub fn target_categories(&self) -> &'static [Category] {
        match self {
            SceneKind::Studio => &[Category::Picture],
            SceneKind::Corridor => &[Category::Sink],
            SceneKind::Apartment => &[Category::Bed, Category::Counter],
            SceneKind::Ranch => &[Category::Picture, Category::Table],
            SceneKind::Maze => &[Category::Chair, Category::Table, Category::ChestOfDrawers],
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Sounding object categories; the fixed index order defines goal
/// vectors and category heads everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Picture,
    Sink,
    Bed,
    Counter,
    Table,
    Chair,
    ChestOfDrawers,
}

pub const NUM_CATEGORIES: usize = 7;

impl Category {
    pub fn all() -> [Category; NUM_CATEGORIES] {
        [
            Category::Picture,
            Category::Sink,
            Category::Bed,
            Category::Counter,
            Category::Table,
            Category::Chair,
            Category::ChestOfDrawers,
        ]
    }

    pub fn index(&self) -> usize {
        match self {
            Category::Picture => 0,
            Category::Sink => 1,
            Category::Bed => 2,
            Category::Counter => 3,
            Category::Table => 4,
            Category::Chair => 5,
            Category::ChestOfDrawers => 6,
        }
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Category::all().get(i).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Category::Picture => "picture",
            Category::Sink => "sink",
            Category::Bed => "bed",
            Category::Counter => "counter",
            Category::Table => "table",
            Category::Chair => "chair",
            Category::ChestOfDrawers => "chest_of_drawers",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub category: Category,
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub kind: SceneKind,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Row-major [y * width + x]; true = wall.
    pub walls: Vec<bool>,
    pub targets: Vec<Target>,
}

impl Scene {
    pub fn blocked(&self, x: isize, y: isize) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return true;
        }
        self.walls[y as usize * self.width + x as usize]
    }

    pub fn navigable(&self, c: Cell) -> bool {
        !self.blocked(c.0 as isize, c.1 as isize)
    }

    pub fn navigable_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.walls[y * self.width + x] {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn navigable_count(&self) -> usize {
        self.walls.iter().filter(|w| !**w).count()
    }

    pub fn area_m2(&self) -> f64 {
        self.navigable_count() as f64 * CELL_SIZE_M * CELL_SIZE_M
    }

    pub fn target_index_of_category(&self, cat: Category) -> Option<usize> {
        self.targets.iter().position(|t| t.category == cat)
    }

    /// Multi-hot over categories for a set of target indices.
    pub fn category_multi_hot(&self, target_indices: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; NUM_CATEGORIES];
        for &ti in target_indices {
            v[self.targets[ti].category.index()] = 1.0;
        }
        v
    }
}

/// Agent pose in world coordinates; cell centers sit on integer
/// coordinates, heading is radians counterclockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub t: usize,
}

impl Pose {
    pub fn at_cell(cell: Cell, heading_idx: u8, t: usize) -> Pose {
        Pose {
            x: cell.0 as f64,
            y: cell.1 as f64,
            heading: heading_idx as f64 * std::f64::consts::FRAC_PI_2,
            t,
        }
    }

    pub fn cell(&self) -> Cell {
        (self.x.round() as usize, self.y.round() as usize)
    }
}

/// Cardinal headings: 0 = +x, 1 = +y, 2 = -x, 3 = -y.
pub fn heading_delta(idx: u8) -> (isize, isize) {
    match idx % 4 {
        0 => (1, 0),
        1 => (0, 1),
        2 => (-1, 0),
        _ => (0, -1),
    }
}

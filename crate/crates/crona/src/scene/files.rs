//! Dataset serialization: `scene.json` + `episodes.json` in one
//! directory, schema-versioned and re-verified on load.

use super::episodes::{verify_episode, EpisodeConstraints, EpisodeSpec};
use super::{Scene, SceneKind, SCENE_SCHEMA_VERSION};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeFile {
    pub schema_version: u32,
    pub kind: SceneKind,
    pub scene_seed: u64,
    pub n_agents: usize,
    pub episodes: Vec<EpisodeSpec>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: Scene,
    pub n_agents: usize,
    pub episodes: Vec<EpisodeSpec>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &EpisodeSpec> {
        self.episodes.iter().filter(|e| e.split == super::Split::Train)
    }

    pub fn val(&self) -> impl Iterator<Item = &EpisodeSpec> {
        self.episodes.iter().filter(|e| e.split == super::Split::Val)
    }
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let scene_json = serde_json::to_string_pretty(&dataset.scene)
        .map_err(|e| Error::format(format!("scene encode: {e}")))?;
    fs::write(dir.join("scene.json"), scene_json)?;
    let file = EpisodeFile {
        schema_version: SCENE_SCHEMA_VERSION,
        kind: dataset.scene.kind,
        scene_seed: dataset.scene.seed,
        n_agents: dataset.n_agents,
        episodes: dataset.episodes.clone(),
    };
    let eps_json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::format(format!("episodes encode: {e}")))?;
    fs::write(dir.join("episodes.json"), eps_json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let scene_text = fs::read_to_string(dir.join("scene.json"))?;
    let scene: Scene = serde_json::from_str(&scene_text)
        .map_err(|e| Error::format(format!("scene decode: {e}")))?;
    if scene.schema_version != SCENE_SCHEMA_VERSION {
        return Err(Error::format(format!(
            "scene schema {} unsupported (expected {SCENE_SCHEMA_VERSION})",
            scene.schema_version
        )));
    }
    let eps_text = fs::read_to_string(dir.join("episodes.json"))?;
    let file: EpisodeFile = serde_json::from_str(&eps_text)
        .map_err(|e| Error::format(format!("episodes decode: {e}")))?;
    if file.schema_version != SCENE_SCHEMA_VERSION {
        return Err(Error::format(format!(
            "episode schema {} unsupported (expected {SCENE_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    if file.kind != scene.kind || file.scene_seed != scene.seed {
        return Err(Error::format("episodes.json does not match scene.json"));
    }
    let constraints = EpisodeConstraints::for_kind(scene.kind);
    for e in &file.episodes {
        if e.starts.len() != file.n_agents {
            return Err(Error::format(format!(
                "episode {}: {} starts but dataset declares {} agents",
                e.id,
                e.starts.len(),
                file.n_agents
            )));
        }
        verify_episode(&scene, e, &constraints)?;
    }
    Ok(Dataset { scene, n_agents: file.n_agents, episodes: file.episodes })
}

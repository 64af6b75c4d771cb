//! Episode traces and reward accounting.
//!
//! A trace records enough of an episode (starts, actions, post-step
//! poses, rewards, found events) that the whole reward stream can be
//! rebuilt from scratch. `verify_trace_accounting` re-simulates
//! movement and discovery with its own searches and recomputes every
//! term; any divergence from the recorded rewards is an error.

use super::reward::{RewardSpec, StepFacts};
use crate::error::{Error, Result};
use crate::scene::{geodesic::DistanceField, heading_delta, Cell, EpisodeSpec, Scene};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub actions: Vec<usize>,
    /// Agent cells after the step.
    pub cells: Vec<Cell>,
    pub headings: Vec<u8>,
    pub reward: f64,
    pub newly_found: Vec<usize>,
    pub stops: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode_id: u32,
    pub start_cells: Vec<Cell>,
    pub start_headings: Vec<u8>,
    /// Indices into the scene target list.
    pub targets: Vec<usize>,
    pub records: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn new(spec: &EpisodeSpec) -> EpisodeTrace {
        EpisodeTrace {
            episode_id: spec.id,
            start_cells: spec.starts.iter().map(|s| s.cell).collect(),
            start_headings: spec.starts.iter().map(|s| s.heading).collect(),
            targets: spec.targets.clone(),
            records: Vec::new(),
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    /// One JSON object per line, append-friendly.
    pub fn write_jsonl(traces: &[EpisodeTrace], path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in traces {
            let line = serde_json::to_string(t).map_err(|e| Error::format(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<EpisodeTrace>> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::format(e.to_string()))?);
        }
        Ok(out)
    }
}

/// Reward stream split into its four components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub slack: f64,
    pub distance: f64,
    pub goal: f64,
    pub stop: f64,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.slack + self.distance + self.goal + self.stop
    }
}

const TOL: f64 = 1e-9;

/// Re-simulates the trace and checks recorded poses, found events, and
/// rewards. Returns the recomputed decomposition on success.
pub fn verify_trace_accounting(
    scene: &Scene,
    trace: &EpisodeTrace,
    success_radius: f64,
    progressive_on_distance: bool,
) -> Result<Decomposition> {
    let n_agents = trace.start_cells.len();
    let n_total = trace.targets.len();
    let spec = RewardSpec::for_episode(scene.kind, n_total);
    let fields: Vec<DistanceField> = trace
        .targets
        .iter()
        .map(|&ti| DistanceField::new(scene, scene.targets[ti].cell))
        .collect();

    let mut cells = trace.start_cells.clone();
    let mut headings = trace.start_headings.clone();
    let mut found = vec![false; n_total];
    let mut dec = Decomposition { slack: 0.0, distance: 0.0, goal: 0.0, stop: 0.0 };

    for rec in &trace.records {
        if rec.actions.len() != n_agents {
            return Err(Error::format(format!("step {}: action arity mismatch", rec.t)));
        }
        let unfound_before: Vec<usize> = (0..n_total).filter(|&j| !found[j]).collect();
        let prev_cells = cells.clone();

        for i in 0..n_agents {
            match rec.actions[i] {
                0 => {
                    let (dx, dy) = heading_delta(headings[i]);
                    let nx = cells[i].0 as isize + dx;
                    let ny = cells[i].1 as isize + dy;
                    if !scene.blocked(nx, ny) {
                        cells[i] = (nx as usize, ny as usize);
                    }
                }
                1 => headings[i] = (headings[i] + 1) % 4,
                2 => headings[i] = (headings[i] + 3) % 4,
                3 => {}
                a => return Err(Error::format(format!("step {}: unknown action {a}", rec.t))),
            }
        }
        if cells != rec.cells || headings != rec.headings {
            return Err(Error::invalid(format!(
                "step {}: replayed poses diverge from trace",
                rec.t
            )));
        }

        let stops: Vec<bool> = rec.actions.iter().map(|a| *a == 3).collect();
        let mut newly_found = Vec::new();
        let mut success_stops = vec![false; n_agents];
        for i in 0..n_agents {
            if !stops[i] {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for &j in &unfound_before {
                if found[j] {
                    continue;
                }
                if let Some(d) = fields[j].get(cells[i]) {
                    if d <= success_radius && best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((j, d));
                    }
                }
            }
            if let Some((j, _)) = best {
                found[j] = true;
                newly_found.push(j);
                success_stops[i] = true;
            } else if spec.single_target
                && !unfound_before.is_empty()
                && fields[0].get(cells[i]).map_or(false, |d| d <= success_radius)
            {
                success_stops[i] = true;
            }
        }
        if newly_found != rec.newly_found || stops != rec.stops {
            return Err(Error::invalid(format!(
                "step {}: replayed events diverge from trace",
                rec.t
            )));
        }

        let facts = StepFacts {
            fields: &fields,
            unfound_before: &unfound_before,
            prev_cells: &prev_cells,
            new_cells: &cells,
            stops: &stops,
            success_stops: &success_stops,
            newly_found: &newly_found,
            n_total,
            progressive_on_distance,
        };
        let recomputed = spec.team_reward(&facts);
        if (recomputed - rec.reward).abs() > TOL {
            return Err(Error::invalid(format!(
                "step {}: recomputed reward {recomputed} vs recorded {}",
                rec.t, rec.reward
            )));
        }
        accumulate(&mut dec, &spec, &facts);
    }

    let diff = (dec.total() - trace.total_reward()).abs();
    if diff > TOL {
        return Err(Error::invalid(format!(
            "decomposition total {} vs summed rewards {} (diff {diff})",
            dec.total(),
            trace.total_reward()
        )));
    }
    Ok(dec)
}

/// Book the step's reward into the four aggregate terms using the same
/// constants but term-by-term.
fn accumulate(dec: &mut Decomposition, spec: &RewardSpec, f: &StepFacts) {
    let n_agents = f.prev_cells.len();
    let dist_scale =
        if f.progressive_on_distance { spec.dist_scale * spec.progressive } else { spec.dist_scale };
    let goal_mult =
        if f.progressive_on_distance { spec.goal_scale } else { spec.goal_scale * spec.progressive };
    for i in 0..n_agents {
        let d_prev = f
            .unfound_before
            .iter()
            .filter_map(|&j| f.fields[j].get(f.prev_cells[i]))
            .fold(f64::INFINITY, f64::min);
        let d_new = f
            .unfound_before
            .iter()
            .filter_map(|&j| f.fields[j].get(f.new_cells[i]))
            .fold(f64::INFINITY, f64::min);
        if d_prev.is_finite() && d_new.is_finite() {
            dec.distance += dist_scale * (d_prev - d_new);
        }
    }
    if spec.single_target {
        dec.slack += spec.slack * n_agents as f64;
        dec.goal +=
            spec.goal_scale * f.success_stops.iter().filter(|s| **s).count() as f64;
    } else {
        dec.slack += spec.slack;
        dec.stop -= spec.stop_penalty * f.stops.iter().filter(|s| **s).count() as f64;
        let already = f.n_total - f.unfound_before.len();
        for k in 0..f.newly_found.len() {
            dec.goal += (already + k + 1) as f64 / f.n_total as f64 * goal_mult;
        }
    }
}

//! Scripted experts and demonstration datasets.
//!
//! Demos are stored as JSON lines, one trajectory per line, with float arrays
//! packed as base64-encoded little-endian `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::env::{
    Action, Env, EnvVariant, Instruction, Observation, Task, VariantId, WorldState, OBS_DIM,
    TRAIN_PARAPHRASES,
};
use crate::error::{Result, RftfError};
use crate::seeding::derive_seed;

/// Cruise speed of the scripted expert (per step, per unit distance).
pub const EXPERT_SPEED: f64 = 0.025;
/// The expert closes its gripper once this close to the object.
pub const EXPERT_ENGAGE_DIST: f64 = 0.02;
/// Highest tolerated expert failure rate per (variant, task, paraphrase) cell.
pub const MAX_EXPERT_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub instruction: Instruction,
    pub observations: Vec<Observation>,
    /// `None` for state-only exports.
    pub actions: Option<Vec<Action>>,
    pub success: bool,
    pub variant_id: VariantId,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub trajectories: Vec<Trajectory>,
    pub split: Split,
}

impl DemoDataset {
    pub fn has_actions(&self) -> bool {
        !self.trajectories.is_empty() && self.trajectories.iter().all(|t| t.actions.is_some())
    }

    pub fn num_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let err = [to[0] - from[0], to[1] - from[1]];
    let n = (err[0] * err[0] + err[1] * err[1]).sqrt();
    if n <= EXPERT_SPEED {
        err
    } else {
        [err[0] * EXPERT_SPEED / n, err[1] * EXPERT_SPEED / n]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Approach an object with an open gripper, close it on arrival.
fn approach_and_engage(state: &WorldState, object: [f64; 2]) -> Action {
    let delta = toward(state.effector, object);
    let cmd = if dist(state.effector, object) < EXPERT_ENGAGE_DIST {
        1.0
    } else {
        -1.0
    };
    Action { delta, gripper_cmd: cmd }
}

/// Saturated proportional controller along approach -> engage -> transport.
pub fn expert_policy(state: &WorldState, instruction: &Instruction) -> Action {
    let scene = &state.scene;
    match instruction.task {
        Task::ReachTarget => Action {
            delta: toward(state.effector, scene.target),
            gripper_cmd: -1.0,
        },
        Task::PressButton => approach_and_engage(state, scene.button),
        Task::ToggleSwitch => approach_and_engage(state, scene.switch),
        Task::PushBlockToZone => {
            if state.held {
                Action {
                    delta: toward(state.block, scene.zone),
                    gripper_cmd: 1.0,
                }
            } else {
                approach_and_engage(state, state.block)
            }
        }
    }
}

/// Runs the expert from a fresh reset and records the episode.
pub fn expert_rollout(variant: &EnvVariant, instruction: &Instruction, seed: u64) -> Trajectory {
    let (mut env, obs) = Env::reset(variant, instruction, seed);
    let mut observations = vec![obs];
    let mut actions = Vec::new();
    let mut success = false;
    while !env.is_done() {
        let action = expert_policy(env.state(), instruction);
        let out = env.step(&action).expect("episode is running");
        actions.push(action);
        observations.push(out.observation);
        success = out.success;
    }
    Trajectory {
        instruction: instruction.clone(),
        observations,
        actions: Some(actions),
        success,
        variant_id: variant.id,
        seed,
    }
}

/// Re-executes the stored actions; returns the observations and success flag.
pub fn replay(trajectory: &Trajectory, variant: &EnvVariant) -> Result<(Vec<Observation>, bool)> {
    let actions = trajectory
        .actions
        .as_ref()
        .ok_or_else(|| RftfError::Usage("cannot replay a state-only trajectory".into()))?;
    let (mut env, obs) = Env::reset(variant, &trajectory.instruction, trajectory.seed);
    let mut observations = vec![obs];
    let mut success = false;
    for a in actions {
        let out = env.step(a)?;
        observations.push(out.observation);
        success = out.success;
    }
    Ok((observations, success))
}

fn split_seed(split: Split, parts: &[u64]) -> u64 {
    let s = derive_seed(parts) >> 1;
    match split {
        Split::Train => s,
        Split::Val => s | (1 << 63),
    }
}

/// Exactly `n_per_pair` successful expert demos per (variant, task, train
/// paraphrase). Failed rollouts are discarded and reseeded.
pub fn generate_demos(
    variants: &[EnvVariant],
    tasks: &[Task],
    n_per_pair: usize,
    seed_base: u64,
    split: Split,
) -> Result<DemoDataset> {
    if n_per_pair == 0 {
        return Err(RftfError::Usage("n_per_pair must be >= 1".into()));
    }
    let mut trajectories = Vec::with_capacity(variants.len() * tasks.len() * 2 * n_per_pair);
    for variant in variants {
        for task in tasks {
            for paraphrase in TRAIN_PARAPHRASES {
                let instruction = Instruction::new(*task, paraphrase)?;
                let mut kept = 0;
                let mut attempts = 0u64;
                let mut failures = 0usize;
                while kept < n_per_pair {
                    let seed = split_seed(
                        split,
                        &[
                            seed_base,
                            variant.id.index() as u64,
                            task.index() as u64,
                            paraphrase as u64,
                            attempts,
                        ],
                    );
                    attempts += 1;
                    let traj = expert_rollout(variant, &instruction, seed);
                    if traj.success {
                        trajectories.push(traj);
                        kept += 1;
                    } else {
                        failures += 1;
                        if failures > n_per_pair {
                            break;
                        }
                    }
                }
                let rate = failures as f64 / attempts as f64;
                if rate > MAX_EXPERT_FAILURE_RATE {
                    return Err(RftfError::Environment(format!(
                        "expert failed {failures}/{attempts} rollouts on variant {} task {task}",
                        variant.id
                    )));
                }
            }
        }
    }
    Ok(DemoDataset {
        trajectories,
        split,
    })
}

pub fn export_state_only(dataset: &DemoDataset) -> DemoDataset {
    DemoDataset {
        trajectories: dataset
            .trajectories
            .iter()
            .map(|t| Trajectory {
                actions: None,
                ..t.clone()
            })
            .collect(),
        split: dataset.split,
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    split: Split,
    variant: VariantId,
    task: Task,
    paraphrase: usize,
    seed: u64,
    success: bool,
    obs_dim: usize,
    len: usize,
    observations: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    actions: Option<String>,
}

fn pack(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    B64.encode(bytes)
}

fn unpack(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| RftfError::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(RftfError::Format("payload is not a whole number of f64".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn to_record(t: &Trajectory, split: Split) -> TrajectoryRecord {
    TrajectoryRecord {
        split,
        variant: t.variant_id,
        task: t.instruction.task,
        paraphrase: t.instruction.paraphrase_id,
        seed: t.seed,
        success: t.success,
        obs_dim: t.observations.first().map_or(OBS_DIM, |o| o.features.len()),
        len: t.observations.len(),
        observations: pack(t.observations.iter().flat_map(|o| o.features.iter().copied())),
        actions: t
            .actions
            .as_ref()
            .map(|a| pack(a.iter().flat_map(|a| a.to_array()))),
    }
}

fn from_record(r: TrajectoryRecord) -> Result<Trajectory> {
    let flat = unpack(&r.observations)?;
    if r.obs_dim == 0 || flat.len() != r.obs_dim * r.len {
        return Err(RftfError::Format(format!(
            "trajectory seed {}: {} observation values for {} x {}",
            r.seed,
            flat.len(),
            r.len,
            r.obs_dim
        )));
    }
    let observations = flat
        .chunks_exact(r.obs_dim)
        .map(|c| Observation { features: c.to_vec() })
        .collect();
    let actions = match r.actions {
        None => None,
        Some(s) => {
            let flat = unpack(&s)?;
            if flat.len() != 3 * r.len.saturating_sub(1) {
                return Err(RftfError::Format(format!(
                    "trajectory seed {}: {} action values for {} states",
                    r.seed,
                    flat.len(),
                    r.len
                )));
            }
            Some(
                flat.chunks_exact(3)
                    .map(|c| Action::from_array([c[0], c[1], c[2]]))
                    .collect(),
            )
        }
    };
    Ok(Trajectory {
        instruction: Instruction::new(r.task, r.paraphrase)?,
        observations,
        actions,
        success: r.success,
        variant_id: r.variant,
        seed: r.seed,
    })
}

pub fn write_jsonl(dataset: &DemoDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| RftfError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| RftfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in &dataset.trajectories {
        let line = serde_json::to_string(&to_record(t, dataset.split)).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| RftfError::io(path, e))?;
    }
    w.flush().map_err(|e| RftfError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<DemoDataset> {
    let file = File::open(path).map_err(|e| RftfError::io(path, e))?;
    let mut trajectories = Vec::new();
    let mut split = Split::Train;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RftfError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| RftfError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        split = rec.split;
        trajectories.push(from_record(rec)?);
    }
    Ok(DemoDataset {
        trajectories,
        split,
    })
}

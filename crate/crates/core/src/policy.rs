//! Instruction-conditioned policy with a discretized action head.
//!
//! Each action dimension gets its own categorical distribution over
//! `bins_per_dim` uniform bins; the joint distribution is their product.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{action_bounds, Action, Instruction, Observation, INSTRUCTION_DIM, OBS_DIM};
use crate::error::{Result, RftfError};
use crate::tensor::{
    forward, load_checkpoint, ops, save_checkpoint, Activation, CheckpointMeta, MlpSpec,
    ParamVector,
};

pub const ACTION_DIMS: usize = 3;
pub const POLICY_INPUT_DIM: usize = OBS_DIM + INSTRUCTION_DIM;

/// Observation features followed by the instruction embedding.
pub fn policy_input(obs: &Observation, instruction: &Instruction) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.features.len() + instruction.embedding.len());
    x.extend_from_slice(&obs.features);
    x.extend_from_slice(&instruction.embedding);
    x
}

/// Uniform bin of `value` in `[low, high]`; the upper bound maps to the last bin.
pub fn discretize_value(value: f64, (low, high): (f64, f64), bins: usize) -> Result<usize> {
    if !(low..=high).contains(&value) {
        return Err(RftfError::Usage(format!(
            "action component {value} outside [{low}, {high}]"
        )));
    }
    let idx = ((value - low) / (high - low) * bins as f64).floor() as usize;
    Ok(idx.min(bins - 1))
}

pub fn bin_center(index: usize, (low, high): (f64, f64), bins: usize) -> f64 {
    low + (index as f64 + 0.5) * (high - low) / bins as f64
}

pub fn discretize_action(
    action: &Action,
    bounds: &[(f64, f64); ACTION_DIMS],
    bins: usize,
) -> Result<[usize; ACTION_DIMS]> {
    let a = action.to_array();
    Ok([
        discretize_value(a[0], bounds[0], bins)?,
        discretize_value(a[1], bounds[1], bins)?,
        discretize_value(a[2], bounds[2], bins)?,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub action: Action,
    pub log_prob: f64,
    pub bins: [usize; ACTION_DIMS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct HeadMeta {
    bins_per_dim: usize,
    bounds: [(f64, f64); ACTION_DIMS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePolicy {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub bins_per_dim: usize,
    pub bounds: [(f64, f64); ACTION_DIMS],
}

impl DiscretePolicy {
    pub fn new(spec: MlpSpec, params: ParamVector, bins_per_dim: usize) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        if bins_per_dim == 0 || spec.output_dim != ACTION_DIMS * bins_per_dim {
            return Err(RftfError::Config(format!(
                "head width {} does not equal {ACTION_DIMS} x {bins_per_dim} bins",
                spec.output_dim
            )));
        }
        if spec.input_dim != POLICY_INPUT_DIM {
            return Err(RftfError::Config(format!(
                "policy input must be {POLICY_INPUT_DIM}, got {}",
                spec.input_dim
            )));
        }
        Ok(Self {
            spec,
            params,
            bins_per_dim,
            bounds: action_bounds(),
        })
    }

    pub fn spec_for(hidden: &[usize], activation: Activation, bins: usize) -> Result<MlpSpec> {
        MlpSpec::new(POLICY_INPUT_DIM, hidden.to_vec(), ACTION_DIMS * bins, activation)
    }

    pub fn init<R: Rng + ?Sized>(
        hidden: &[usize],
        activation: Activation,
        bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Self::spec_for(hidden, activation, bins)?;
        let params = spec.xavier_init(rng);
        Self::new(spec, params, bins)
    }

    pub fn with_params(&self, params: ParamVector) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, input)
    }

    /// Per-dimension log-probabilities, `ACTION_DIMS` rows of `bins_per_dim`.
    pub fn log_probs(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(input)?;
        Ok(logits
            .chunks_exact(self.bins_per_dim)
            .map(ops::log_softmax)
            .collect())
    }

    pub fn log_prob_of(&self, input: &[f64], bins: &[usize; ACTION_DIMS]) -> Result<f64> {
        Ok(self
            .log_probs(input)?
            .iter()
            .zip(bins)
            .map(|(lp, b)| lp[*b])
            .sum())
    }

    pub fn action_from_bins(&self, bins: &[usize; ACTION_DIMS]) -> Action {
        Action::from_array([
            bin_center(bins[0], self.bounds[0], self.bins_per_dim),
            bin_center(bins[1], self.bounds[1], self.bins_per_dim),
            bin_center(bins[2], self.bounds[2], self.bins_per_dim),
        ])
    }

    /// Independent categorical draw per dimension; the action is the bin center.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        instruction: &Instruction,
        rng: &mut R,
    ) -> Result<SampledAction> {
        let log_probs = self.log_probs(&policy_input(obs, instruction))?;
        let mut bins = [0usize; ACTION_DIMS];
        let mut log_prob = 0.0;
        for (d, lp) in log_probs.iter().enumerate() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = lp.len() - 1;
            for (k, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    chosen = k;
                    break;
                }
            }
            bins[d] = chosen;
            log_prob += lp[chosen];
        }
        Ok(SampledAction {
            action: self.action_from_bins(&bins),
            log_prob,
            bins,
        })
    }

    pub fn greedy_bins(&self, input: &[f64]) -> Result<[usize; ACTION_DIMS]> {
        let logits = self.logits(input)?;
        let mut bins = [0usize; ACTION_DIMS];
        for (b, chunk) in bins.iter_mut().zip(logits.chunks_exact(self.bins_per_dim)) {
            *b = ops::argmax(chunk);
        }
        Ok(bins)
    }

    pub fn greedy_action(&self, obs: &Observation, instruction: &Instruction) -> Result<Action> {
        let bins = self.greedy_bins(&policy_input(obs, instruction))?;
        Ok(self.action_from_bins(&bins))
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        self.save_tagged(path, seed, step, &[])
    }

    /// Like `save`, with extra string entries in the JSON sidecar.
    pub fn save_tagged(&self, path: &Path, seed: u64, step: u64, tags: &[(&str, &str)]) -> Result<()> {
        let head = HeadMeta {
            bins_per_dim: self.bins_per_dim,
            bounds: self.bounds,
        };
        let mut extra = serde_json::Map::new();
        extra.insert(
            "action_head".into(),
            serde_json::to_value(head).expect("head metadata serializes"),
        );
        for (k, v) in tags {
            extra.insert(k.to_string(), serde_json::Value::from(*v));
        }
        let meta = CheckpointMeta {
            kind: "policy".into(),
            spec: self.spec.clone(),
            seed,
            step,
            extra,
        };
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        if meta.kind != "policy" {
            return Err(RftfError::Config(format!(
                "{} holds a `{}` checkpoint, expected a policy",
                path.display(),
                meta.kind
            )));
        }
        let head: HeadMeta = meta
            .extra
            .get("action_head")
            .cloned()
            .ok_or_else(|| RftfError::Format(format!("{}: missing action_head", path.display())))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| RftfError::Format(e.to_string()))
            })?;
        let mut policy = Self::new(meta.spec, params, head.bins_per_dim)?;
        policy.bounds = head.bounds;
        Ok(policy)
    }
}

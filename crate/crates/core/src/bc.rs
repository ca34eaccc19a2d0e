//! Behavior-cloning pretraining of the base policy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::DemoDataset;
use crate::env::action_bounds;
use crate::error::{Result, RftfError};
use crate::policy::{discretize_action, policy_input, DiscretePolicy, ACTION_DIMS};
use crate::tensor::{
    adam_step, backward_accumulate, forward_cached, ops, Activation, AdamConfig, AdamState,
    GradScope,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub bins_per_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            activation: Activation::Tanh,
            bins_per_dim: 101,
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// One supervised example: policy input plus per-dimension target bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BcSample {
    pub input: Vec<f64>,
    pub bins: [usize; ACTION_DIMS],
}

pub fn bc_samples(dataset: &DemoDataset, bins: usize) -> Result<Vec<BcSample>> {
    let bounds = action_bounds();
    let mut out = Vec::with_capacity(dataset.num_states());
    for t in &dataset.trajectories {
        let actions = t.actions.as_ref().ok_or_else(|| {
            RftfError::Usage(format!("trajectory seed {} has no action labels", t.seed))
        })?;
        for (obs, a) in t.observations.iter().zip(actions) {
            out.push(BcSample {
                input: policy_input(obs, &t.instruction),
                bins: discretize_action(a, &bounds, bins)?,
            });
        }
    }
    Ok(out)
}

/// Mean over samples of the per-dimension cross-entropies summed over
/// dimensions. Accumulates the mean gradient into `grad` when given.
pub fn bc_loss(
    policy: &DiscretePolicy,
    samples: &[&BcSample],
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = samples.len().max(1) as f64;
    let bins = policy.bins_per_dim;
    let mut total = 0.0;
    for s in samples {
        let cache = forward_cached(&policy.spec, &policy.params, &s.input)?;
        let mut upstream = vec![0.0; policy.spec.output_dim];
        for (d, (logits, up)) in cache
            .output()
            .chunks_exact(bins)
            .zip(upstream.chunks_exact_mut(bins))
            .enumerate()
        {
            let lp = ops::log_softmax(logits);
            total -= lp[s.bins[d]];
            for (u, l) in up.iter_mut().zip(&lp) {
                *u = l.exp() / n;
            }
            up[s.bins[d]] -= 1.0 / n;
        }
        if let Some(g) = grad.as_deref_mut() {
            backward_accumulate(&policy.spec, &policy.params, &cache, &upstream, g, GradScope::Full)?;
        }
    }
    Ok(total / n)
}

/// Greedy per-dimension accuracy.
pub fn bc_top1(policy: &DiscretePolicy, samples: &[BcSample]) -> Result<f64> {
    let mut hits = 0usize;
    for s in samples {
        let pred = policy.greedy_bins(&s.input)?;
        hits += pred.iter().zip(&s.bins).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / (samples.len() * ACTION_DIMS).max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone)]
pub struct BcOutcome {
    pub policy: DiscretePolicy,
    /// Entry 0 is the untrained network.
    pub metrics: Vec<BcEpochMetrics>,
}

fn held_out(policy: &DiscretePolicy, val: &[BcSample]) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let refs: Vec<&BcSample> = val.iter().collect();
    Ok((bc_loss(policy, &refs, None)?, bc_top1(policy, val)?))
}

pub fn train_bc(
    train: &DemoDataset,
    val: Option<&DemoDataset>,
    config: &BcConfig,
) -> Result<BcOutcome> {
    if !train.has_actions() {
        return Err(RftfError::Usage(
            "behavior cloning needs a non-empty, action-labeled dataset".into(),
        ));
    }
    let samples = bc_samples(train, config.bins_per_dim)?;
    let val_samples = match val {
        Some(v) => bc_samples(v, config.bins_per_dim)?,
        None => Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = DiscretePolicy::init(
        &config.hidden_dims,
        config.activation,
        config.bins_per_dim,
        &mut rng,
    )?;
    let adam = AdamConfig::with_lr(config.lr);
    let mut state = AdamState::new(policy.params.len());
    let (val_loss, val_top1) = held_out(&policy, &val_samples)?;
    let mut metrics = vec![BcEpochMetrics {
        epoch: 0,
        train_loss: f64::NAN,
        val_loss,
        val_top1,
    }];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch = config.batch_size.max(1);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mb: Vec<&BcSample> = chunk.iter().map(|i| &samples[*i]).collect();
            let mut grad = vec![0.0; policy.params.len()];
            let loss = bc_loss(&policy, &mb, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(RftfError::numerical(
                    format!("bc epoch {epoch}, step {}", state.step() + 1),
                    format!("loss is {loss}"),
                ));
            }
            epoch_loss += loss * mb.len() as f64;
            adam_step(&mut policy.params, &grad, &mut state, &adam)?;
        }
        let (val_loss, val_top1) = held_out(&policy, &val_samples)?;
        metrics.push(BcEpochMetrics {
            epoch,
            train_loss: epoch_loss / samples.len() as f64,
            val_loss,
            val_top1,
        });
    }
    Ok(BcOutcome { policy, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{generate_demos, Split};
    use crate::env::{EnvVariant, Task, VariantId};
    use crate::tensor::grad_check;

    #[test]
    fn bc_gradient_matches_finite_differences() {
        let ds = generate_demos(&[EnvVariant::builtin(VariantId::A)], &[Task::PushBlockToZone], 1, 0, Split::Train)
            .unwrap();
        let samples = bc_samples(&ds, 5).unwrap();
        let refs: Vec<&BcSample> = samples.iter().step_by(7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = DiscretePolicy::init(&[6], Activation::Tanh, 5, &mut rng).unwrap();
        let report = grad_check(policy.params.values(), |x| {
            let p = policy.with_params(policy.params.with_values(x));
            let mut g = vec![0.0; x.len()];
            let l = bc_loss(&p, &refs, Some(&mut g)).unwrap();
            (l, g)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn rejects_state_only_data() {
        let ds = generate_demos(&[EnvVariant::builtin(VariantId::A)], &[Task::ReachTarget], 1, 0, Split::Train)
            .unwrap();
        let so = crate::demos::export_state_only(&ds);
        assert!(matches!(
            train_bc(&so, None, &BcConfig::default()),
            Err(RftfError::Usage(_))
        ));
    }

    #[test]
    fn short_training_reduces_held_out_loss() {
        let vs = [EnvVariant::builtin(VariantId::A)];
        let train = generate_demos(&vs, &Task::ALL, 4, 0, Split::Train).unwrap();
        let val = generate_demos(&vs, &Task::ALL, 1, 0, Split::Val).unwrap();
        let cfg = BcConfig {
            hidden_dims: vec![32],
            bins_per_dim: 21,
            epochs: 3,
            ..BcConfig::default()
        };
        let out = train_bc(&train, Some(&val), &cfg).unwrap();
        assert_eq!(out.metrics.len(), 4);
        assert!(out.metrics[3].val_loss < out.metrics[0].val_loss);
    }
}

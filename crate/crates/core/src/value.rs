//! Progress-estimating value model trained from the temporal order of
//! successful demonstrations, without action labels.
//!
//! For a demonstration `s_0, ..., s_{n-1}` every pair `i < j` contributes
//! `-ln sigmoid(V(s_j) - V(s_i))`, so later states are pushed above earlier
//! ones.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{DemoDataset, Trajectory};
use crate::env::{Instruction, Observation};
use crate::error::{Result, RftfError};
use crate::policy::{policy_input, DiscretePolicy, POLICY_INPUT_DIM};
use crate::tensor::{
    adam_step, backward_accumulate, forward, forward_cached, load_checkpoint, ops,
    save_checkpoint, Activation, AdamConfig, AdamState, CheckpointMeta, GradScope, MlpSpec,
    ParamVector,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub epoch: usize,
}

impl ValueModel {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if spec.output_dim != 1 {
            return Err(RftfError::Config(format!(
                "value head must output one scalar, got {}",
                spec.output_dim
            )));
        }
        spec.check_params(&params)?;
        Ok(Self {
            spec,
            params,
            epoch: 0,
        })
    }

    pub fn init<R: Rng + ?Sized>(hidden: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec::new(POLICY_INPUT_DIM, hidden.to_vec(), 1, activation)?;
        let params = spec.xavier_init(rng);
        Self::new(spec, params)
    }

    /// Same trunk as the policy with its weights copied; a fresh scalar head.
    pub fn from_policy_trunk<R: Rng + ?Sized>(policy: &DiscretePolicy, rng: &mut R) -> Result<Self> {
        let p = &policy.spec;
        let spec = MlpSpec::new(p.input_dim, p.hidden_dims.clone(), 1, p.activation)?;
        let mut params = spec.xavier_init(rng);
        for seg in spec.layout().iter().filter(|s| s.name.starts_with("trunk.")) {
            let src = policy
                .params
                .segment(&seg.name)
                .ok_or_else(|| RftfError::Config(format!("policy lacks segment {}", seg.name)))?;
            params
                .segment_mut(&seg.name)
                .expect("segment from own layout")
                .copy_from_slice(src);
        }
        Self::new(spec, params)
    }

    pub fn predict_input(&self, input: &[f64]) -> Result<f64> {
        Ok(forward(&self.spec, &self.params, input)?[0])
    }

    pub fn predict_value(&self, obs: &Observation, instruction: &Instruction) -> Result<f64> {
        self.predict_input(&policy_input(obs, instruction))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.save_tagged(path, seed, &[])
    }

    /// Like `save`, with extra string entries in the JSON sidecar.
    pub fn save_tagged(&self, path: &Path, seed: u64, tags: &[(&str, &str)]) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "value".into(),
            spec: self.spec.clone(),
            seed,
            step: self.epoch as u64,
            extra: tags
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::from(*v)))
                .collect(),
        };
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        if meta.kind != "value" {
            return Err(RftfError::Config(format!(
                "{} holds a `{}` checkpoint, expected a value model",
                path.display(),
                meta.kind
            )));
        }
        let mut m = Self::new(meta.spec, params)?;
        m.epoch = meta.step as usize;
        Ok(m)
    }
}

/// `-ln sigmoid(delta)` for a single ordered pair.
#[inline]
pub fn pair_loss(delta: f64) -> f64 {
    ops::softplus(-delta)
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(RftfError::Usage(format!(
            "contrastive loss needs at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(RftfError::numerical(
            format!("contrastive loss value {i}"),
            format!("{}", values[i]),
        ));
    }
    Ok(())
}

/// Mean pair loss over all `C(n, 2)` ordered pairs.
pub fn contrastive_loss(values: &[f64]) -> Result<f64> {
    contrastive_loss_grad(values).map(|(l, _)| l)
}

/// Loss and its gradient with respect to each value.
pub fn contrastive_loss_grad(values: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_values(values)?;
    let n = values.len();
    let pairs = (n * (n - 1) / 2) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let delta = values[j] - values[i];
            loss += pair_loss(delta);
            let w = ops::sigmoid(-delta) / pairs;
            grad[j] -= w;
            grad[i] += w;
        }
    }
    Ok((loss / pairs, grad))
}

/// Ordered `(early, late)` state pairs drawn from demonstrations.
#[derive(Debug, Clone, Default)]
pub struct PairBatch {
    pub pairs: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    pub episode_ids: Vec<usize>,
}

impl PairBatch {
    pub fn push(&mut self, traj: &Trajectory, episode: usize, early: usize, late: usize) {
        debug_assert!(early < late);
        self.pairs.push((
            traj.observations[early].features.clone(),
            traj.observations[late].features.clone(),
            traj.instruction.embedding.clone(),
        ));
        self.episode_ids.push(episode);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Up to `max_pairs` distinct `(i, j)` with `i < j < n`, uniformly without
/// replacement.
pub fn sample_pairs<R: Rng + ?Sized>(n: usize, max_pairs: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let total = n * (n - 1) / 2;
    let k = total.min(max_pairs);
    let mut picked: Vec<usize> = index::sample(rng, total, k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|idx| unrank_pair(n, idx)).collect()
}

/// Lexicographic pair rank -> `(i, j)`.
fn unrank_pair(n: usize, mut idx: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if idx < row {
            return (i, i + 1 + idx);
        }
        idx -= row;
        i += 1;
    }
}

fn join(features: &[f64], embedding: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(features.len() + embedding.len());
    x.extend_from_slice(features);
    x.extend_from_slice(embedding);
    x
}

/// Mean pair loss of a batch; accumulates the parameter gradient when given.
pub fn pair_batch_loss(
    model: &ValueModel,
    batch: &PairBatch,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = batch.len().max(1) as f64;
    let mut total = 0.0;
    let (w_off, _) = model.spec.offsets(model.spec.num_layers() - 1);
    let head = &model.params.values()[w_off..w_off + model.spec.head_input_dim()];
    for (early, late, emb) in &batch.pairs {
        let ce = forward_cached(&model.spec, &model.params, &join(early, emb))?;
        let cl = forward_cached(&model.spec, &model.params, &join(late, emb))?;
        // the output bias cancels in the difference; leave it out so it does exactly
        let delta: f64 = head.iter().zip(cl.head_input().iter().zip(ce.head_input())).map(|(w, (l, e))| w * (l - e)).sum();
        total += pair_loss(delta);
        if let Some(g) = grad.as_deref_mut() {
            let w = ops::sigmoid(-delta) / n;
            backward_accumulate(&model.spec, &model.params, &cl, &[-w], g, GradScope::Full)?;
            backward_accumulate(&model.spec, &model.params, &ce, &[w], g, GradScope::Full)?;
        }
    }
    Ok(total / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub trajectories_per_batch: usize,
    pub max_pairs_per_trajectory: usize,
    pub holdout_pairs: usize,
    pub seed: u64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            activation: Activation::Tanh,
            epochs: 5,
            lr: 3e-3,
            trajectories_per_batch: 4,
            max_pairs_per_trajectory: 64,
            holdout_pairs: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_pairwise_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ValueTrainingOutcome {
    /// The epoch-1 model, used for fine-tuning.
    pub selected: ValueModel,
    /// One snapshot per epoch, index 0 = epoch 1.
    pub per_epoch: Vec<ValueModel>,
    pub metrics: Vec<ValueEpochMetrics>,
    /// Loss of every minibatch of the first epoch, in order.
    pub first_epoch_batch_losses: Vec<f64>,
}

pub fn train_value_model(
    demos: &DemoDataset,
    holdout: Option<&DemoDataset>,
    init_from: Option<&DiscretePolicy>,
    config: &ValueConfig,
) -> Result<ValueTrainingOutcome> {
    let usable: Vec<usize> = (0..demos.trajectories.len())
        .filter(|i| demos.trajectories[*i].len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(RftfError::Usage(
            "value training needs at least one trajectory with two or more states".into(),
        ));
    }
    if config.epochs == 0 {
        return Err(RftfError::Config("value training needs at least one epoch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match init_from {
        Some(policy) => ValueModel::from_policy_trunk(policy, &mut rng)?,
        None => ValueModel::init(&config.hidden_dims, config.activation, &mut rng)?,
    };
    let adam = AdamConfig::with_lr(config.lr);
    let mut state = AdamState::new(model.params.len());
    let mut per_epoch = Vec::with_capacity(config.epochs);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut first_epoch_batch_losses = Vec::new();
    let mut order = usable;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut pair_count = 0usize;
        for chunk in order.chunks(config.trajectories_per_batch.max(1)) {
            let mut batch = PairBatch::default();
            for &ti in chunk {
                let traj = &demos.trajectories[ti];
                for (i, j) in sample_pairs(traj.len(), config.max_pairs_per_trajectory, &mut rng) {
                    batch.push(traj, ti, i, j);
                }
            }
            let mut grad = vec![0.0; model.params.len()];
            let loss = pair_batch_loss(&model, &batch, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(RftfError::numerical(
                    format!("value epoch {epoch}, step {}", state.step() + 1),
                    format!("loss is {loss}"),
                ));
            }
            if epoch == 1 {
                first_epoch_batch_losses.push(loss);
            }
            loss_sum += loss * batch.len() as f64;
            pair_count += batch.len();
            adam_step(&mut model.params, &grad, &mut state, &adam)?;
        }
        model.epoch = epoch;
        let accuracy = match holdout {
            Some(h) => pairwise_accuracy(
                &model,
                h,
                config.holdout_pairs,
                config.seed ^ 0x00ac_c000,
            )?,
            None => f64::NAN,
        };
        metrics.push(ValueEpochMetrics {
            epoch,
            mean_loss: loss_sum / pair_count.max(1) as f64,
            holdout_pairwise_accuracy: accuracy,
        });
        per_epoch.push(model.clone());
    }
    Ok(ValueTrainingOutcome {
        selected: per_epoch[0].clone(),
        per_epoch,
        metrics,
        first_epoch_batch_losses,
    })
}

pub const VALUE_CSV_HEADER: &str = "epoch,mean_loss,holdout_pairwise_accuracy";

pub fn value_metrics_csv(metrics: &[ValueEpochMetrics]) -> String {
    let mut out = format!("{VALUE_CSV_HEADER}\n");
    for m in metrics {
        out.push_str(&format!("{},{},{}\n", m.epoch, m.mean_loss, m.holdout_pairwise_accuracy));
    }
    out
}

/// Fraction of sampled `(earlier, later)` frame pairs for which the later
/// frame scores strictly higher.
pub fn pairwise_accuracy(
    model: &ValueModel,
    demos: &DemoDataset,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let usable: Vec<&Trajectory> = demos.trajectories.iter().filter(|t| t.len() >= 2).collect();
    if usable.is_empty() || n_pairs == 0 {
        return Err(RftfError::Usage(
            "pairwise accuracy needs n_pairs >= 1 and a trajectory with two states".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for _ in 0..n_pairs {
        let t = usable[rng.random_range(0..usable.len())];
        let (i, j) = sample_pairs(t.len(), 1, &mut rng)[0];
        let vi = model.predict_value(&t.observations[i], &t.instruction)?;
        let vj = model.predict_value(&t.observations[j], &t.instruction)?;
        if vj > vi {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_pairs as f64)
}

/// Raw value of every state of a trajectory, in order. Never reads actions.
pub fn score_episode(model: &ValueModel, trajectory: &Trajectory) -> Result<Vec<f64>> {
    score_states(model, &trajectory.observations, &trajectory.instruction)
}

pub fn score_states(
    model: &ValueModel,
    observations: &[Observation],
    instruction: &Instruction,
) -> Result<Vec<f64>> {
    observations
        .iter()
        .map(|o| model.predict_value(o, instruction))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::demos::Split;
    use crate::env::{Task, VariantId, OBS_DIM};
    use crate::tensor::grad_check;

    fn linear_model(weights: &[f64], bias: f64) -> ValueModel {
        let spec = MlpSpec::new(POLICY_INPUT_DIM, vec![], 1, Activation::Tanh).unwrap();
        let mut params = spec.zeros();
        params.segment_mut("head.weight").unwrap()[..weights.len()].copy_from_slice(weights);
        params.segment_mut("head.bias").unwrap()[0] = bias;
        ValueModel::new(spec, params).unwrap()
    }

    fn indexed_trajectory(values: &[f64]) -> Trajectory {
        Trajectory {
            instruction: Instruction::new(Task::ReachTarget, 0).unwrap(),
            observations: values
                .iter()
                .map(|v| {
                    let mut f = vec![0.0; OBS_DIM];
                    f[0] = *v;
                    Observation { features: f }
                })
                .collect(),
            actions: None,
            success: true,
            variant_id: VariantId::A,
            seed: 0,
        }
    }

    fn dataset(ts: Vec<Trajectory>) -> DemoDataset {
        DemoDataset {
            trajectories: ts,
            split: Split::Val,
        }
    }

    #[test]
    fn closed_form_losses() {
        assert!((contrastive_loss(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(contrastive_loss(&[0.0, 100.0]).unwrap() < 1e-40);
        let expected = (2.0 * (-1f64).exp().ln_1p() + (-2f64).exp().ln_1p()) / 3.0;
        assert!((contrastive_loss(&[0.0, 1.0, 2.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.251151).abs() < 1e-6);
        assert!(matches!(contrastive_loss(&[1.0]), Err(RftfError::Usage(_))));
    }

    #[test]
    fn exhaustive_loss_equals_mean_of_pair_losses() {
        let v = [0.3, -1.2, 0.8, 2.5, 1.1];
        let mut pair_losses = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                pair_losses.push(-(1.0 / (1.0 + (-(v[j] - v[i]) as f64).exp())).ln());
            }
        }
        assert_eq!(pair_losses.len(), 10);
        let brute = pair_losses.iter().sum::<f64>() / 10.0;
        assert!((contrastive_loss(&v).unwrap() - brute).abs() < 1e-14);
    }

    #[test]
    fn pair_sampling_is_exhaustive_when_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = sample_pairs(5, 64, &mut rng);
        assert_eq!(pairs.len(), 10);
        assert!(pairs.iter().all(|(i, j)| i < j && *j < 5));
        let long = sample_pairs(40, 64, &mut rng);
        assert_eq!(long.len(), 64);
        let mut dedup = long.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 64);
        assert!(sample_pairs(1, 64, &mut rng).is_empty());
    }

    #[test]
    fn prediction_cases() {
        let spec = MlpSpec::new(POLICY_INPUT_DIM, vec![8], 1, Activation::Tanh).unwrap();
        let zero = ValueModel::new(spec.clone(), spec.zeros()).unwrap();
        let t = indexed_trajectory(&[3.0]);
        assert_eq!(zero.predict_value(&t.observations[0], &t.instruction).unwrap(), 0.0);
        let m = linear_model(&[2.0, 0.0, 1.0], 0.5);
        let mut f = vec![0.0; OBS_DIM];
        f[0] = 1.0;
        let v = m.predict_value(&Observation { features: f.clone() }, &t.instruction).unwrap();
        // 2*1 + 0.5; the reach one-hot sits beyond the first OBS_DIM inputs.
        assert_eq!(v, 2.5);
        assert_eq!(v, m.predict_value(&Observation { features: f }, &t.instruction).unwrap());
        assert!(m.predict_input(&[1.0]).is_err());
    }

    #[test]
    fn pairwise_accuracy_conventions() {
        let frame_index = linear_model(&[1.0], 0.0);
        let ds = dataset(vec![indexed_trajectory(&[0.0, 1.0, 2.0, 3.0, 4.0])]);
        assert_eq!(pairwise_accuracy(&frame_index, &ds, 500, 1).unwrap(), 1.0);
        let constant = linear_model(&[], 3.0);
        assert_eq!(pairwise_accuracy(&constant, &ds, 500, 1).unwrap(), 0.0);
    }

    #[test]
    fn pairwise_accuracy_on_three_frames_is_two_thirds() {
        // values per frame [1, 0, 2]: (0,1) wrong, (0,2) right, (1,2) right
        let m = linear_model(&[1.0], 0.0);
        let t = indexed_trajectory(&[1.0, 0.0, 2.0]);
        let v = score_episode(&m, &t).unwrap();
        let mut correct = 0;
        for i in 0..3 {
            for j in i + 1..3 {
                correct += (v[j] > v[i]) as usize;
            }
        }
        assert_eq!(correct, 2);
        let acc = pairwise_accuracy(&m, &dataset(vec![t]), 30_000, 9).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 0.01, "{acc}");
    }

    #[test]
    fn scoring_shapes() {
        let m = linear_model(&[1.0], 0.0);
        let t = indexed_trajectory(&[4.0]);
        assert_eq!(score_episode(&m, &t).unwrap(), vec![4.0]);
        let t = indexed_trajectory(&[1.0, 5.0, 2.0]);
        assert_eq!(score_episode(&m, &t).unwrap(), score_episode(&m, &t).unwrap());
    }

    #[test]
    fn value_gradient_wrt_values() {
        let v = [0.2, -0.4, 1.3, 0.9, -2.0, 0.1];
        let r = grad_check(&v, |x| contrastive_loss_grad(x).unwrap()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ValueModel::init(&[6], Activation::Tanh, &mut rng).unwrap();
        let ds = crate::demos::generate_demos(
            &[crate::env::EnvVariant::builtin(VariantId::B)],
            &[Task::PushBlockToZone],
            1,
            0,
            Split::Train,
        )
        .unwrap();
        let mut batch = PairBatch::default();
        for (i, j) in sample_pairs(ds.trajectories[0].len(), 12, &mut rng) {
            batch.push(&ds.trajectories[0], 0, i, j);
        }
        let r = grad_check(model.params.values(), |x| {
            let m = ValueModel::new(model.spec.clone(), model.params.with_values(x)).unwrap();
            let mut g = vec![0.0; x.len()];
            let l = pair_batch_loss(&m, &batch, Some(&mut g)).unwrap();
            (l, g)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn trunk_copied_from_policy_and_head_fresh() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let policy = DiscretePolicy::init(&[16, 8], Activation::Tanh, 7, &mut rng).unwrap();
        let vm = ValueModel::from_policy_trunk(&policy, &mut rng).unwrap();
        for name in ["trunk.0.weight", "trunk.0.bias", "trunk.1.weight", "trunk.1.bias"] {
            assert_eq!(vm.params.segment(name), policy.params.segment(name));
        }
        assert_eq!(vm.params.segment("head.weight").unwrap().len(), 8);
        assert!(vm.params.segment("head.weight").unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let ds = dataset(vec![indexed_trajectory(&[1.0])]);
        assert!(train_value_model(&ds, None, None, &ValueConfig::default()).is_err());
        let m = linear_model(&[1.0], 0.0);
        assert!(pairwise_accuracy(&m, &ds, 10, 0).is_err());
    }

    proptest! {
        #[test]
        fn translation_invariance(values in prop::collection::vec(-50f64..50.0, 2..30), c in -500f64..500.0) {
            let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
            let a = contrastive_loss(&values).unwrap();
            let b = contrastive_loss(&shifted).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn constant_sequences_cost_ln2(v in -1e3f64..1e3, n in 2usize..40) {
            let l = contrastive_loss(&vec![v; n]).unwrap();
            prop_assert!((l - 2f64.ln()).abs() < 1e-12);
        }

        #[test]
        fn loss_is_strictly_positive(values in prop::collection::vec(-20f64..20.0, 2..20)) {
            prop_assert!(contrastive_loss(&values).unwrap() > 0.0);
        }
    }
}

//! Reinforcement fine-tuning of a cloned policy with value-shaped rewards.
//!
//! Per iteration: collect stochastic rollouts, score every state with the
//! frozen value model, normalize per episode, shape, compute outcome-balanced
//! advantages, then run clipped PPO epochs with a KL penalty toward the
//! initial policy. Only the head layer is trained.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvVariant, Instruction, Observation};
use crate::error::{Result, RftfError};
use crate::policy::{policy_input, DiscretePolicy, ACTION_DIMS};
use crate::seeding::derive_seed;
use crate::tensor::{
    adam_step, backward_accumulate, forward_cached, ops, AdamConfig, AdamState, GradScope,
    MlpSpec, ParamVector,
};
use crate::value::{score_states, ValueModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Dense,
    Sparse,
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardMode::Dense => "dense",
            RewardMode::Sparse => "sparse",
        })
    }
}

impl FromStr for RewardMode {
    type Err = RftfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(RewardMode::Dense),
            "sparse" => Ok(RewardMode::Sparse),
            other => Err(RftfError::Usage(format!("unknown reward mode `{other}`"))),
        }
    }
}

/// Min-max scaling to `[0, 1]` within one episode; constant input maps to zeros.
pub fn normalize_values(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / span).collect()
}

/// `R_t = gamma * V(s_{t+1}) - V(s_t)` for every state but the last, which gets 0.
pub fn shaped_rewards(values: &[f64], gamma: f64) -> Vec<f64> {
    let mut r: Vec<f64> = values.windows(2).map(|w| gamma * w[1] - w[0]).collect();
    if !values.is_empty() {
        r.push(0.0);
    }
    r
}

/// Outcome-dependent advantage scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Balance {
    pub eta_success: f64,
    pub eta_failure: f64,
}

impl Default for Balance {
    fn default() -> Self {
        Self {
            eta_success: 0.25,
            eta_failure: 1.0,
        }
    }
}

impl Balance {
    fn for_outcome(&self, success: bool) -> (f64, f64) {
        if success {
            (self.eta_success, 1.0)
        } else {
            (self.eta_failure, -1.0)
        }
    }
}

/// `A_t = eta * (I + sum_{n>=t} (gamma*lambda)^{n-t} R_n)` with `I = +1/-1`.
pub fn advantages(rewards: &[f64], success: bool, gamma: f64, lambda: f64, balance: &Balance) -> Vec<f64> {
    let (eta, indicator) = balance.for_outcome(success);
    let decay = gamma * lambda;
    let mut out = vec![0.0; rewards.len()];
    let mut tail = 0.0;
    for t in (0..rewards.len()).rev() {
        tail = rewards[t] + decay * tail;
        out[t] = eta * (indicator + tail);
    }
    out
}

/// Outcome-only advantages: `eta * I` at each of the `len` positions.
pub fn sparse_baseline_advantages(success: bool, len: usize, balance: &Balance) -> Vec<f64> {
    let (eta, indicator) = balance.for_outcome(success);
    // `indicator + 0.0` keeps this identical to `advantages` on zero rewards.
    vec![eta * (indicator + 0.0); len]
}

/// `sum_j p_j (log p_j - log q_j)` for one categorical, from log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| if *lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlController {
    pub beta: f64,
    pub target_kl: f64,
}

impl KlController {
    pub const BETA_MIN: f64 = 1e-5;
    pub const BETA_MAX: f64 = 10.0;

    pub fn new(beta: f64, target_kl: f64) -> Result<Self> {
        if !(beta > 0.0 && target_kl > 0.0) {
            return Err(RftfError::Config(format!(
                "beta ({beta}) and target_kl ({target_kl}) must be positive"
            )));
        }
        Ok(Self {
            beta: beta.clamp(Self::BETA_MIN, Self::BETA_MAX),
            target_kl,
        })
    }
}

pub fn adapt_beta(controller: KlController, observed_kl: f64) -> KlController {
    let mut beta = controller.beta;
    if observed_kl > 1.5 * controller.target_kl {
        beta *= 2.0;
    } else if observed_kl < controller.target_kl / 1.5 {
        beta /= 2.0;
    }
    KlController {
        beta: beta.clamp(KlController::BETA_MIN, KlController::BETA_MAX),
        ..controller
    }
}

/// One collected episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutEpisode {
    pub variant: EnvVariant,
    pub instruction: Instruction,
    /// `T + 1` observations, the last one after the final action.
    pub observations: Vec<Observation>,
    pub bins: Vec<[usize; ACTION_DIMS]>,
    pub old_log_probs: Vec<f64>,
    /// Frozen value-model scores, one per observation; empty when unscored.
    pub raw_values: Vec<f64>,
    pub success: bool,
    pub seed: u64,
}

impl RolloutEpisode {
    pub fn num_actions(&self) -> usize {
        self.bins.len()
    }
}

/// Sample an environment and training instruction, then roll out the
/// stochastic policy. Everything is a function of `seed`.
pub fn run_episode(
    policy: &DiscretePolicy,
    variants: &[EnvVariant],
    instructions: &[Instruction],
    seed: u64,
) -> Result<RolloutEpisode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = &variants[rng.random_range(0..variants.len())];
    let instruction = &instructions[rng.random_range(0..instructions.len())];
    let (mut env, mut obs) = Env::reset(variant, instruction, rng.random());
    let mut observations = vec![obs.clone()];
    let mut bins = Vec::new();
    let mut old_log_probs = Vec::new();
    let mut success = false;
    while !env.is_done() {
        let sampled = policy.sample_action(&obs, instruction, &mut rng)?;
        let out = env.step(&sampled.action)?;
        bins.push(sampled.bins);
        old_log_probs.push(sampled.log_prob);
        obs = out.observation;
        observations.push(obs.clone());
        success = out.success;
    }
    Ok(RolloutEpisode {
        variant: variant.clone(),
        instruction: instruction.clone(),
        observations,
        bins,
        old_log_probs,
        raw_values: Vec::new(),
        success,
        seed,
    })
}

/// `n_episodes` rollouts with seeds derived from `(seed, index)`. Workers
/// split the index range; the result is ordered by index, so the output does
/// not depend on `workers`.
pub fn collect_rollouts(
    policy: &DiscretePolicy,
    value_model: Option<&ValueModel>,
    variants: &[EnvVariant],
    instructions: &[Instruction],
    n_episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<RolloutEpisode>> {
    if variants.is_empty() || instructions.is_empty() {
        return Err(RftfError::Usage("rollouts need at least one variant and instruction".into()));
    }
    let one = |k: usize| -> Result<RolloutEpisode> {
        let mut ep = run_episode(policy, variants, instructions, derive_seed(&[seed, k as u64]))?;
        if let Some(vm) = value_model {
            ep.raw_values = score_states(vm, &ep.observations, &ep.instruction)?;
        }
        Ok(ep)
    };
    let workers = workers.clamp(1, n_episodes.max(1));
    if workers == 1 {
        return (0..n_episodes).map(one).collect();
    }
    let chunk = n_episodes.div_ceil(workers);
    let parts: Vec<Result<Vec<RolloutEpisode>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                s.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(n_episodes))
                        .map(one)
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n_episodes);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One `(state, action)` training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub input: Vec<f64>,
    pub bins: [usize; ACTION_DIMS],
    pub old_log_prob: f64,
    pub advantage: f64,
    /// Reference-policy log-probabilities, `ACTION_DIMS * bins` entries.
    pub ref_log_probs: Vec<f64>,
    pub episode: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoHyper {
    pub clip_eps: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub loss: f64,
    pub surrogate: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub max_ratio_deviation: f64,
}

/// Clipped surrogate with a KL penalty toward the reference policy:
/// `-mean(min(r A, clip(r) A) - beta KL(pi || pi_ref))`.
///
/// `spec`/`params` map `sample.input` to `ACTION_DIMS * bins` logits. The
/// gradient is accumulated into `grad` when given.
pub fn ppo_loss(
    spec: &MlpSpec,
    params: &ParamVector,
    bins: usize,
    samples: &[&PpoSample],
    hyper: &PpoHyper,
    mut grad: Option<&mut [f64]>,
    scope: GradScope,
) -> Result<PpoStats> {
    if samples.is_empty() {
        return Err(RftfError::Usage("ppo_loss needs at least one sample".into()));
    }
    if spec.output_dim != ACTION_DIMS * bins {
        return Err(RftfError::Config(format!(
            "logit width {} does not match {ACTION_DIMS} x {bins}",
            spec.output_dim
        )));
    }
    let n = samples.len() as f64;
    let (lo, hi) = (1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps);
    let mut stats = PpoStats::default();
    let mut upstream = vec![0.0; spec.output_dim];
    for s in samples {
        let cache = forward_cached(spec, params, &s.input)?;
        let logits = cache.output();
        let mut log_prob = 0.0;
        let mut per_dim = Vec::with_capacity(ACTION_DIMS);
        let mut kl = 0.0;
        for d in 0..ACTION_DIMS {
            let range = d * bins..(d + 1) * bins;
            let lp = ops::log_softmax(&logits[range.clone()]);
            log_prob += lp[s.bins[d]];
            let kl_d = categorical_kl(&lp, &s.ref_log_probs[range]);
            kl += kl_d;
            per_dim.push((lp, kl_d));
        }
        let ratio = (log_prob - s.old_log_prob).exp();
        if !ratio.is_finite() {
            return Err(RftfError::numerical(
                format!("ppo ratio, episode {} step {}", s.episode, s.step),
                format!("ratio {ratio} from log-prob {log_prob} vs old {}", s.old_log_prob),
            ));
        }
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(lo, hi) * s.advantage;
        let surrogate = unclipped.min(clipped);
        stats.surrogate += surrogate / n;
        stats.mean_kl += kl / n;
        stats.loss += (hyper.beta * kl - surrogate) / n;
        stats.mean_ratio += ratio / n;
        stats.max_ratio_deviation = stats.max_ratio_deviation.max((ratio - 1.0).abs());
        if (ratio - 1.0).abs() > hyper.clip_eps {
            stats.clip_fraction += 1.0 / n;
        }
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        // d(-surrogate)/d(log_prob), nonzero only on the unclipped branch.
        let through_ratio = if unclipped <= clipped { -unclipped / n } else { 0.0 };
        let kl_weight = hyper.beta / n;
        for (d, (lp, kl_d)) in per_dim.iter().enumerate() {
            let base = d * bins;
            let ref_lp = &s.ref_log_probs[base..base + bins];
            for j in 0..bins {
                let p = lp[j].exp();
                let onehot = if j == s.bins[d] { 1.0 } else { 0.0 };
                let kl_grad = if p > 0.0 { p * (lp[j] - ref_lp[j] - kl_d) } else { 0.0 };
                upstream[base + j] = through_ratio * (onehot - p) + kl_weight * kl_grad;
            }
        }
        backward_accumulate(spec, params, &cache, &upstream, g, scope)?;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub reward: RewardMode,
    pub gamma: f64,
    pub lambda: f64,
    pub balance: Balance,
    pub clip_eps: f64,
    pub beta0: f64,
    pub target_kl: f64,
    pub lr: f64,
    pub total_episodes: usize,
    pub episodes_per_iter: usize,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    /// Halt when success drops below this fraction of the initial rate ...
    pub divergence_fraction: f64,
    /// ... for this many consecutive iterations.
    pub divergence_patience: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            reward: RewardMode::Dense,
            gamma: 0.99,
            lambda: 0.95,
            balance: Balance::default(),
            clip_eps: 0.2,
            beta0: 0.1,
            target_kl: 0.01,
            lr: 3e-4,
            total_episodes: 1000,
            episodes_per_iter: 16,
            ppo_epochs: 4,
            minibatch: 256,
            divergence_fraction: 0.25,
            divergence_patience: 3,
            workers: 1,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(RftfError::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("lambda", self.lambda)?;
        if !(self.clip_eps > 0.0) || !(self.lr >= 0.0) {
            return Err(RftfError::Config("clip_eps must be > 0 and lr >= 0".into()));
        }
        if self.episodes_per_iter == 0 || self.minibatch == 0 || self.ppo_epochs == 0 {
            return Err(RftfError::Config(
                "episodes_per_iter, minibatch and ppo_epochs must be positive".into(),
            ));
        }
        KlController::new(self.beta0, self.target_kl)?;
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.total_episodes.div_ceil(self.episodes_per_iter.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    /// Cumulative episodes collected so far.
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_ep_len: f64,
    /// KL to the reference policy on this batch after the updates.
    pub mean_kl: f64,
    pub clip_frac: f64,
    /// Coefficient used during this iteration's updates.
    pub beta: f64,
    pub mean_advantage: f64,
}

pub const FINETUNE_CSV_HEADER: &str =
    "iter,episodes,success_rate,mean_ep_len,mean_kl,clip_frac,beta,mean_advantage";

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub policy: DiscretePolicy,
    pub metrics: Vec<IterationMetrics>,
    /// Statistics of the very first minibatch update.
    pub first_update: Option<PpoStats>,
    /// Iteration at which the divergence guard stopped training.
    pub halted_at: Option<usize>,
}

/// Advantages for every action of an episode under the configured reward.
pub fn episode_advantages(ep: &RolloutEpisode, cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    let t = ep.num_actions();
    let mut adv = match cfg.reward {
        RewardMode::Sparse => sparse_baseline_advantages(ep.success, t + 1, &cfg.balance),
        RewardMode::Dense => {
            if ep.raw_values.len() != ep.observations.len() {
                return Err(RftfError::Usage(format!(
                    "dense rewards need {} state values, episode has {}",
                    ep.observations.len(),
                    ep.raw_values.len()
                )));
            }
            let rewards = shaped_rewards(&normalize_values(&ep.raw_values), cfg.gamma);
            advantages(&rewards, ep.success, cfg.gamma, cfg.lambda, &cfg.balance)
        }
    };
    adv.truncate(t);
    Ok(adv)
}

/// The head layer as a stand-alone linear network over trunk features.
fn head_network(policy: &DiscretePolicy) -> Result<(MlpSpec, ParamVector)> {
    let spec = MlpSpec::new(
        policy.spec.head_input_dim(),
        Vec::new(),
        policy.spec.output_dim,
        policy.spec.activation,
    )?;
    let mut params = spec.zeros();
    params
        .values_mut()
        .copy_from_slice(&policy.params.values()[policy.spec.head_range()]);
    Ok((spec, params))
}

fn trunk_features(policy: &DiscretePolicy, input: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_cached(&policy.spec, &policy.params, input)?
        .head_input()
        .to_vec())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// PPO fine-tuning of the head. `value_model` is required for dense rewards.
pub fn finetune(
    initial: &DiscretePolicy,
    value_model: Option<&ValueModel>,
    variants: &[EnvVariant],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if cfg.reward == RewardMode::Dense && value_model.is_none() {
        return Err(RftfError::Config("dense rewards need a value model".into()));
    }
    let scorer = match cfg.reward {
        RewardMode::Dense => value_model,
        RewardMode::Sparse => None,
    };
    let instructions = Instruction::train_set();
    let bins = initial.bins_per_dim;
    let (head_spec, mut head) = head_network(initial)?;
    let (_, ref_head) = head_network(initial)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut adam_state = AdamState::new(head.len());
    let mut kl = KlController::new(cfg.beta0, cfg.target_kl)?;
    let mut policy = initial.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5_4f_f1e]));
    let mut metrics = Vec::new();
    let mut first_update = None;
    let mut halted_at = None;
    let mut initial_success = None;
    let mut below = 0usize;
    let mut collected = 0usize;

    for iter in 1..=cfg.iterations() {
        let n = cfg.episodes_per_iter.min(cfg.total_episodes - collected);
        let seed = derive_seed(&[cfg.seed, iter as u64]);
        let episodes =
            collect_rollouts(&policy, scorer, variants, &instructions, n, seed, cfg.workers)?;
        collected += n;

        let mut samples = Vec::new();
        for (ei, ep) in episodes.iter().enumerate() {
            let adv = episode_advantages(ep, cfg)?;
            for t in 0..ep.num_actions() {
                let input = trunk_features(&policy, &policy_input(&ep.observations[t], &ep.instruction))?;
                let ref_log_probs = forward_cached(&head_spec, &ref_head, &input)?
                    .output()
                    .chunks_exact(bins)
                    .flat_map(ops::log_softmax)
                    .collect();
                samples.push(PpoSample {
                    input,
                    bins: ep.bins[t],
                    old_log_prob: ep.old_log_probs[t],
                    advantage: adv[t],
                    ref_log_probs,
                    episode: ei,
                    step: t,
                });
            }
        }

        let hyper = PpoHyper {
            clip_eps: cfg.clip_eps,
            beta: kl.beta,
        };
        let mut clip_fracs = Vec::new();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..cfg.ppo_epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<&PpoSample> = chunk.iter().map(|i| &samples[*i]).collect();
                let mut grad = vec![0.0; head.len()];
                let stats = ppo_loss(&head_spec, &head, bins, &batch, &hyper, Some(&mut grad), GradScope::Full)?;
                if first_update.is_none() {
                    first_update = Some(stats);
                }
                clip_fracs.push(stats.clip_fraction);
                adam_step(&mut head, &grad, &mut adam_state, &adam)?;
            }
        }
        let all: Vec<&PpoSample> = samples.iter().collect();
        let after = ppo_loss(&head_spec, &head, bins, &all, &hyper, None, GradScope::Full)?;

        let success_rate = mean(episodes.iter().map(|e| e.success as u8 as f64));
        metrics.push(IterationMetrics {
            iter,
            episodes: collected,
            success_rate,
            mean_ep_len: mean(episodes.iter().map(|e| e.num_actions() as f64)),
            mean_kl: after.mean_kl,
            clip_frac: mean(clip_fracs.into_iter()),
            beta: kl.beta,
            mean_advantage: mean(samples.iter().map(|s| s.advantage)),
        });
        kl = adapt_beta(kl, after.mean_kl);

        let range = policy.spec.head_range();
        policy.params.values_mut()[range].copy_from_slice(head.values());

        let base = *initial_success.get_or_insert(success_rate);
        if success_rate < cfg.divergence_fraction * base {
            below += 1;
            if below >= cfg.divergence_patience {
                halted_at = Some(iter);
                break;
            }
        } else {
            below = 0;
        }
    }
    Ok(FinetuneOutcome {
        policy,
        metrics,
        first_update,
        halted_at,
    })
}

pub fn metrics_csv(metrics: &[IterationMetrics]) -> String {
    let mut out = String::from(FINETUNE_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.iter, m.episodes, m.success_rate, m.mean_ep_len, m.mean_kl, m.clip_frac, m.beta, m.mean_advantage
        ));
    }
    out
}

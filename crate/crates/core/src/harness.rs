//! Chained evaluation, experiment protocols, reports and plots.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bc::{train_bc, BcConfig, BcEpochMetrics};
use crate::demos::{export_state_only, generate_demos, DemoDataset, Split};
use crate::env::{
    Env, EnvVariant, Instruction, Observation, Task, VariantId, EVAL_PARAPHRASES,
    TRAIN_PARAPHRASES,
};
use crate::error::{Result, RftfError};
use crate::finetune::{finetune, metrics_csv, FinetuneConfig, RewardMode};
use crate::plots::{emit_plots, parse_finetune_csv, PlotInputs};
use crate::policy::DiscretePolicy;
use crate::seeding::derive_seed;
use crate::tensor::encode_params;
use crate::value::{train_value_model, value_metrics_csv, ValueConfig, ValueEpochMetrics, ValueModel};

pub const CHAIN_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub n_sequences: usize,
    pub paraphrases: Vec<usize>,
    /// Carry block, switch and layout between the tasks of a sequence.
    pub chain_persistence: bool,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_sequences: 500,
            paraphrases: EVAL_PARAPHRASES.to_vec(),
            chain_persistence: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    /// Tasks completed in a row, per sequence.
    pub completed: Vec<u8>,
    /// `l[n-1]` = fraction of sequences completing at least `n` tasks.
    pub l: [f64; CHAIN_LEN],
    pub avg_len: f64,
}

impl ChainResult {
    pub fn from_completed(completed: Vec<u8>) -> Result<Self> {
        if completed.is_empty() {
            return Err(RftfError::Usage("chain result needs at least one sequence".into()));
        }
        let n = completed.len() as f64;
        let mut l = [0.0; CHAIN_LEN];
        for (k, slot) in l.iter_mut().enumerate() {
            *slot = completed.iter().filter(|c| **c as usize > k).count() as f64 / n;
        }
        let avg_len = completed.iter().map(|c| *c as f64).sum::<f64>() / n;
        Ok(Self {
            completed,
            l,
            avg_len,
        })
    }
}

/// Runs chains where `run_task` drives one task episode to completion and
/// reports success. The environment is already reset for the task.
pub fn eval_chains_with<F>(variant: &EnvVariant, cfg: &ChainConfig, mut run_task: F) -> Result<ChainResult>
where
    F: FnMut(&mut Env, Observation) -> Result<bool>,
{
    if cfg.n_sequences == 0 || cfg.paraphrases.is_empty() {
        return Err(RftfError::Usage(
            "chain evaluation needs n_sequences >= 1 and a paraphrase set".into(),
        ));
    }
    let mut completed = Vec::with_capacity(cfg.n_sequences);
    for seq in 0..cfg.n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, seq as u64]));
        let tasks: Vec<Instruction> = (0..CHAIN_LEN)
            .map(|_| {
                let task = Task::ALL[rng.random_range(0..Task::ALL.len())];
                let para = cfg.paraphrases[rng.random_range(0..cfg.paraphrases.len())];
                Instruction::new(task, para)
            })
            .collect::<Result<_>>()?;
        let mut carry = None;
        let mut done = 0u8;
        for inst in &tasks {
            let reset_seed: u64 = rng.random();
            let (mut env, obs) = match (&carry, cfg.chain_persistence) {
                (Some(state), true) => Env::reset_chained(variant, inst, reset_seed, state),
                _ => Env::reset(variant, inst, reset_seed),
            };
            if !run_task(&mut env, obs)? {
                break;
            }
            done += 1;
            carry = Some(env.state().clone());
        }
        completed.push(done);
    }
    ChainResult::from_completed(completed)
}

/// Greedy (argmax-bin) rollout until the episode ends.
pub fn run_greedy(policy: &DiscretePolicy, env: &mut Env, mut obs: Observation) -> Result<bool> {
    loop {
        let action = policy.greedy_action(&obs, env.instruction())?;
        let out = env.step(&action)?;
        if out.done {
            return Ok(out.success);
        }
        obs = out.observation;
    }
}

pub fn eval_chains(policy: &DiscretePolicy, variant: &EnvVariant, cfg: &ChainConfig) -> Result<ChainResult> {
    eval_chains_with(variant, cfg, |env, obs| run_greedy(policy, env, obs))
}

/// Every knob of a multi-seed experiment. Per-stage `seed` fields are
/// overwritten from `seeds` when a seed is run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub train_variants: Vec<VariantId>,
    pub eval_variant: VariantId,
    pub demos_per_pair: usize,
    pub holdout_demos_per_pair: usize,
    pub bc: BcConfig,
    pub value: ValueConfig,
    pub finetune: FinetuneConfig,
    pub eval: ChainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            train_variants: vec![VariantId::A, VariantId::B, VariantId::C],
            eval_variant: VariantId::D,
            demos_per_pair: 50,
            holdout_demos_per_pair: 5,
            bc: BcConfig {
                epochs: 15,
                ..BcConfig::default()
            },
            value: ValueConfig::default(),
            // desk-scale budget: the library defaults leave the head nearly static here
            finetune: FinetuneConfig {
                lr: 1e-3,
                target_kl: 1.0,
                total_episodes: 4000,
                ..FinetuneConfig::default()
            },
            eval: ChainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| RftfError::Config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RftfError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(RftfError::Config("seeds must not be empty".into()));
        }
        if self.train_variants.is_empty() {
            return Err(RftfError::Config("train_variants must not be empty".into()));
        }
        if self.demos_per_pair == 0 || self.holdout_demos_per_pair == 0 {
            return Err(RftfError::Config("demo counts must be positive".into()));
        }
        if let Some(p) = self.eval.paraphrases.iter().find(|p| TRAIN_PARAPHRASES.contains(p)) {
            return Err(RftfError::Config(format!(
                "eval paraphrase {p} is also a training paraphrase"
            )));
        }
        if self.eval.paraphrases.iter().any(|p| *p >= crate::env::PARAPHRASES_PER_TASK) {
            return Err(RftfError::Config("eval paraphrase id out of range".into()));
        }
        self.finetune.validate()
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    pub fn with_reward(&self, reward: RewardMode) -> Self {
        let mut c = self.clone();
        c.finetune.reward = reward;
        c
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short content id of a parameter vector.
pub fn checkpoint_id(params: &crate::tensor::ParamVector) -> String {
    hex(&Sha256::digest(encode_params(params))[..8])
}

/// Per-seed pretraining products that every protocol starts from.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub bc: DiscretePolicy,
    pub value: ValueModel,
    pub bc_metrics: Vec<BcEpochMetrics>,
    pub value_metrics: Vec<ValueEpochMetrics>,
    /// All epoch snapshots of the value model, epoch 1 first.
    pub value_epochs: Vec<ValueModel>,
    pub holdout: DemoDataset,
}

pub fn demo_seed(seed: u64, split: Split) -> u64 {
    derive_seed(&[seed, 0xde30, split as u64])
}

fn variants_of(ids: &[VariantId]) -> Vec<EnvVariant> {
    ids.iter().map(|id| EnvVariant::builtin(*id)).collect()
}

/// Demos, behavior cloning and value training for one seed.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let variants = variants_of(&cfg.train_variants);
    let train = generate_demos(&variants, &Task::ALL, cfg.demos_per_pair, demo_seed(seed, Split::Train), Split::Train)?;
    let val = generate_demos(&variants, &Task::ALL, cfg.holdout_demos_per_pair, demo_seed(seed, Split::Val), Split::Val)?;
    let bc = train_bc(&train, Some(&val), &BcConfig { seed, ..cfg.bc.clone() })?;
    let state_only = export_state_only(&train);
    let holdout = export_state_only(&val);
    let vcfg = ValueConfig { seed, ..cfg.value.clone() };
    let value = train_value_model(&state_only, Some(&holdout), Some(&bc.policy), &vcfg)?;
    Ok(SeedArtifacts {
        seed,
        bc: bc.policy,
        value: value.selected,
        bc_metrics: bc.metrics,
        value_metrics: value.metrics,
        value_epochs: value.per_epoch,
        holdout,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub l: [f64; CHAIN_LEN],
    pub avg_len: f64,
    pub policy_checkpoint: String,
    pub base_checkpoint: String,
    pub value_checkpoint: Option<String>,
    /// True when every non-head parameter matches the base policy bit for bit.
    pub trunk_unchanged: bool,
    pub halted_at: Option<usize>,
    pub final_train_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: String,
    pub reward: Option<RewardMode>,
    pub train_variants: Vec<VariantId>,
    pub eval_variant: VariantId,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub mean_avg_len: f64,
    pub std_avg_len: f64,
}

impl RunReport {
    fn new(
        protocol: &str,
        reward: Option<RewardMode>,
        train_variants: Vec<VariantId>,
        cfg: &ExperimentConfig,
        seeds: Vec<SeedResult>,
    ) -> Self {
        let n = seeds.len().max(1) as f64;
        let mean = seeds.iter().map(|s| s.avg_len).sum::<f64>() / n;
        let var = seeds.iter().map(|s| (s.avg_len - mean).powi(2)).sum::<f64>() / n;
        Self {
            protocol: protocol.into(),
            reward,
            train_variants,
            eval_variant: cfg.eval_variant,
            config_hash: cfg.hash(),
            seeds,
            mean_avg_len: mean,
            std_avg_len: var.sqrt(),
        }
    }

    pub fn avg_lens(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.avg_len).collect()
    }
}

pub fn trunk_matches(base: &DiscretePolicy, tuned: &DiscretePolicy) -> bool {
    let head = base.spec.head_range();
    let a = &base.params.values()[..head.start];
    let b = &tuned.params.values()[..head.start];
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn chain_cfg(cfg: &ExperimentConfig, seed: u64) -> ChainConfig {
    ChainConfig {
        seed: derive_seed(&[seed, 0xe7a1]),
        ..cfg.eval.clone()
    }
}

/// Un-fine-tuned BC policy evaluated in the eval variant.
pub fn run_baseline(cfg: &ExperimentConfig, artifacts: &[SeedArtifacts]) -> Result<RunReport> {
    let eval_env = EnvVariant::builtin(cfg.eval_variant);
    let mut seeds = Vec::new();
    for a in artifacts {
        let chain = eval_chains(&a.bc, &eval_env, &chain_cfg(cfg, a.seed))?;
        let id = checkpoint_id(&a.bc.params);
        seeds.push(SeedResult {
            seed: a.seed,
            l: chain.l,
            avg_len: chain.avg_len,
            policy_checkpoint: id.clone(),
            base_checkpoint: id,
            value_checkpoint: None,
            trunk_unchanged: true,
            halted_at: None,
            final_train_success: None,
        });
    }
    Ok(RunReport::new("baseline", None, Vec::new(), cfg, seeds))
}

/// Chained evaluation of one policy, reported like a protocol run.
pub fn run_eval(
    cfg: &ExperimentConfig,
    policy: &DiscretePolicy,
    seed: u64,
    variant: VariantId,
) -> Result<RunReport> {
    let chain = eval_chains(policy, &EnvVariant::builtin(variant), &chain_cfg(cfg, seed))?;
    let id = checkpoint_id(&policy.params);
    let result = SeedResult {
        seed,
        l: chain.l,
        avg_len: chain.avg_len,
        policy_checkpoint: id.clone(),
        base_checkpoint: id,
        value_checkpoint: None,
        trunk_unchanged: true,
        halted_at: None,
        final_train_success: None,
    };
    let mut report = RunReport::new("eval", None, Vec::new(), cfg, vec![result]);
    report.eval_variant = variant;
    Ok(report)
}

/// One fine-tuned policy per seed, plus its per-iteration metrics.
#[derive(Debug, Clone)]
pub struct TunedRun {
    pub report: RunReport,
    pub policies: Vec<DiscretePolicy>,
    pub metrics_csv: Vec<String>,
}

fn run_finetune_protocol(
    protocol: &str,
    cfg: &ExperimentConfig,
    artifacts: &[SeedArtifacts],
    train_ids: Vec<VariantId>,
) -> Result<TunedRun> {
    let train_envs = variants_of(&train_ids);
    let eval_env = EnvVariant::builtin(cfg.eval_variant);
    let mut seeds = Vec::new();
    let mut policies = Vec::new();
    let mut csvs = Vec::new();
    for a in artifacts {
        let fcfg = FinetuneConfig {
            seed: derive_seed(&[a.seed, 0xf1e7]),
            ..cfg.finetune.clone()
        };
        let out = finetune(&a.bc, Some(&a.value), &train_envs, &fcfg)?;
        let chain = eval_chains(&out.policy, &eval_env, &chain_cfg(cfg, a.seed))?;
        seeds.push(SeedResult {
            seed: a.seed,
            l: chain.l,
            avg_len: chain.avg_len,
            policy_checkpoint: checkpoint_id(&out.policy.params),
            base_checkpoint: checkpoint_id(&a.bc.params),
            value_checkpoint: match cfg.finetune.reward {
                RewardMode::Dense => Some(checkpoint_id(&a.value.params)),
                RewardMode::Sparse => None,
            },
            trunk_unchanged: trunk_matches(&a.bc, &out.policy),
            halted_at: out.halted_at,
            final_train_success: out.metrics.last().map(|m| m.success_rate),
        });
        csvs.push(metrics_csv(&out.metrics));
        policies.push(out.policy);
    }
    Ok(TunedRun {
        report: RunReport::new(protocol, Some(cfg.finetune.reward), train_ids, cfg, seeds),
        policies,
        metrics_csv: csvs,
    })
}

/// Fine-tune on the training variants, evaluate in the held-out variant.
pub fn run_generalization(cfg: &ExperimentConfig, artifacts: &[SeedArtifacts]) -> Result<TunedRun> {
    run_finetune_protocol("generalization", cfg, artifacts, cfg.train_variants.clone())
}

/// Fine-tune directly in the held-out variant.
pub fn run_adaptation(cfg: &ExperimentConfig, artifacts: &[SeedArtifacts]) -> Result<TunedRun> {
    run_finetune_protocol("adaptation", cfg, artifacts, vec![cfg.eval_variant])
}

/// Generalization runs that differ only in the reward mode.
pub fn run_ablation(cfg: &ExperimentConfig, artifacts: &[SeedArtifacts]) -> Result<(TunedRun, TunedRun)> {
    let dense = cfg.with_reward(RewardMode::Dense);
    let sparse = cfg.with_reward(RewardMode::Sparse);
    if !differ_only_in_reward(&dense, &sparse) {
        return Err(RftfError::Config("ablation configs differ beyond the reward mode".into()));
    }
    Ok((run_generalization(&dense, artifacts)?, run_generalization(&sparse, artifacts)?))
}

/// True when the two configs hash identically once their reward fields agree.
pub fn differ_only_in_reward(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.with_reward(RewardMode::Dense).hash() == b.with_reward(RewardMode::Dense).hash()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub value_epoch1_accuracy: Vec<f64>,
    pub baseline: RunReport,
    pub generalization: RunReport,
    pub generalization_sparse: RunReport,
    pub adaptation: RunReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub artifacts: Vec<SeedArtifacts>,
    pub generalization: TunedRun,
    pub generalization_sparse: TunedRun,
    pub adaptation: TunedRun,
}

pub const SUMMARY_CSV_HEADER: &str = "protocol,reward,seed,l1,l2,l3,l4,l5,avg_len";

pub fn summary_csv(reports: &[&RunReport]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let reward = r.reward.map(|m| m.to_string()).unwrap_or_else(|| "none".into());
        for s in &r.seeds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.protocol, reward, s.seed, s.l[0], s.l[1], s.l[2], s.l[3], s.l[4], s.avg_len
            ));
        }
    }
    out
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| RftfError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| RftfError::io(path, e))
}

/// Baseline, dense and sparse generalization, and adaptation over every
/// configured seed. With `out_dir`, all checkpoints, CSVs, plots and
/// `report.json` are written there.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let artifacts = cfg
        .seeds
        .iter()
        .map(|s| prepare_seed(cfg, *s))
        .collect::<Result<Vec<_>>>()?;
    let baseline = run_baseline(cfg, &artifacts)?;
    let (generalization, generalization_sparse) = run_ablation(cfg, &artifacts)?;
    let adaptation = run_adaptation(&cfg.with_reward(RewardMode::Dense), &artifacts)?;
    let report = ExperimentReport {
        config_hash: cfg.hash(),
        value_epoch1_accuracy: artifacts
            .iter()
            .map(|a| a.value_metrics[0].holdout_pairwise_accuracy)
            .collect(),
        baseline,
        generalization: generalization.report.clone(),
        generalization_sparse: generalization_sparse.report.clone(),
        adaptation: adaptation.report.clone(),
    };
    let outcome = ExperimentOutcome {
        report,
        artifacts,
        generalization,
        generalization_sparse,
        adaptation,
    };
    if let Some(dir) = out_dir {
        write_experiment(cfg, &outcome, dir)?;
    }
    Ok(outcome)
}

fn write_experiment(cfg: &ExperimentConfig, out: &ExperimentOutcome, dir: &Path) -> Result<()> {
    let hash = cfg.hash();
    let tags = [("config_hash", hash.as_str())];
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    let runs = [
        ("generalization_dense", &out.generalization),
        ("generalization_sparse", &out.generalization_sparse),
        ("adaptation_dense", &out.adaptation),
    ];
    for (i, a) in out.artifacts.iter().enumerate() {
        let sd = dir.join(format!("seed_{}", a.seed));
        a.bc.save_tagged(&sd.join("bc.ckpt"), a.seed, cfg.bc.epochs as u64, &tags)?;
        for m in &a.value_epochs {
            m.save_tagged(&sd.join(format!("value_e{}.ckpt", m.epoch)), a.seed, &tags)?;
        }
        write_file(&sd.join("value_metrics.csv"), value_metrics_csv(&a.value_metrics).as_bytes())?;
        for (name, run) in runs {
            run.policies[i].save_tagged(&sd.join(format!("{name}.ckpt")), a.seed, cfg.finetune.total_episodes as u64, &tags)?;
            write_file(&sd.join(format!("finetune_{name}.csv")), run.metrics_csv[i].as_bytes())?;
        }
    }
    let r = &out.report;
    write_file(
        &dir.join("metrics.csv"),
        summary_csv(&[&r.baseline, &r.generalization, &r.generalization_sparse, &r.adaptation]).as_bytes(),
    )?;
    let first = &out.artifacts[0];
    let curve_demo = first.holdout.trajectories.iter().find(|t| t.success);
    let inputs = PlotInputs {
        value_metrics: first.value_metrics.clone(),
        finetune_metrics: runs
            .iter()
            .map(|(name, run)| Ok(((*name).to_string(), parse_finetune_csv(&run.metrics_csv[0])?)))
            .collect::<Result<_>>()?,
        value_curve: match curve_demo {
            Some(t) => Some(crate::value::score_episode(&first.value, t)?),
            None => None,
        },
    };
    emit_plots(&dir.join("plots"), &inputs)?;
    let json = serde_json::to_string_pretty(r).expect("report serializes");
    write_file(&dir.join("report.json"), json.as_bytes())
}

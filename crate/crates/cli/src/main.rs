use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rftf::bc::train_bc;
use rftf::demos::{export_state_only, generate_demos, read_jsonl, write_jsonl, Split};
use rftf::env::{parse_variant_list, EnvVariant, Task, VariantId};
use rftf::finetune::{finetune, metrics_csv, RewardMode};
use rftf::harness::{run_eval, run_experiment, summary_csv, ExperimentConfig};
use rftf::plots::{emit_plots, parse_finetune_csv, parse_value_csv, read_to_string, PlotInputs};
use rftf::policy::DiscretePolicy;
use rftf::value::{train_value_model, value_metrics_csv, ValueModel};

#[derive(Parser)]
#[command(name = "rftf", about = "Value-shaped reinforcement fine-tuning on a 2-D tabletop")]
struct Cli {
    /// Experiment configuration (JSON); missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single rollout worker; runs are bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Base directory for outputs and for relative `--out` paths.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted expert demonstrations as JSON lines.
    GenDemos(GenDemos),
    /// Behavior-clone a discretized policy from action-labeled demos.
    TrainBc(TrainBc),
    /// Train the value model from state-only demos.
    TrainValue(TrainValue),
    /// PPO fine-tuning of a policy head with dense or sparse rewards.
    Finetune(Finetune),
    /// Chained-task evaluation of a policy checkpoint.
    Eval(Eval),
    /// Full multi-seed run: baseline, dense and sparse generalization, adaptation.
    Ablate,
    /// Render SVG plots from metrics CSVs.
    Plot(Plot),
}

#[derive(Args)]
struct GenDemos {
    #[arg(long, default_value = "A,B,C")]
    variants: String,
    /// Demos per (variant, task, paraphrase).
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value = "demos/abc.jsonl")]
    out: PathBuf,
    /// Drop action labels.
    #[arg(long)]
    state_only: bool,
    /// Held-out split uses disjoint episode seeds.
    #[arg(long)]
    holdout: bool,
}

#[derive(Args)]
struct TrainBc {
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    val_demos: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "ckpt/bc.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainValue {
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Policy checkpoint whose trunk initializes the value model.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Path pattern; the placeholder n in braces becomes the epoch number.
    #[arg(long, default_value = "ckpt/value_e{n}.ckpt")]
    out: String,
}

#[derive(Args)]
struct Finetune {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    value: Option<PathBuf>,
    #[arg(long, default_value = "A,B,C")]
    envs: String,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    reward: Option<String>,
    #[arg(long, default_value = "ckpt/rftf.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value = "D")]
    env: String,
    #[arg(long)]
    sequences: Option<usize>,
}

#[derive(Args)]
struct Plot {
    #[arg(long)]
    value_metrics: Option<PathBuf>,
    #[arg(long)]
    finetune_metrics: Vec<PathBuf>,
    /// Value model and demos for a per-state value curve of the first successful demo.
    #[arg(long, requires = "curve_demos")]
    curve_value: Option<PathBuf>,
    #[arg(long)]
    curve_demos: Option<PathBuf>,
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    out_dir: PathBuf,
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn tags(&self) -> [(&'static str, String); 1] {
        [("config_hash", self.cfg.hash())]
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn load_policy(path: &Path) -> Result<DiscretePolicy> {
    if !path.exists() {
        bail!("configuration error: policy checkpoint {} does not exist", path.display());
    }
    Ok(DiscretePolicy::load(path)?)
}

fn load_value(path: &Path) -> Result<ValueModel> {
    if !path.exists() {
        bail!("configuration error: value checkpoint {} does not exist", path.display());
    }
    Ok(ValueModel::load(path)?)
}

fn variants(list: &str) -> Result<Vec<EnvVariant>> {
    Ok(parse_variant_list(list)?.into_iter().map(EnvVariant::builtin).collect())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    cfg.finetune.workers = if cli.deterministic { 1 } else { workers };
    let ctx = Ctx {
        seed: cfg.seeds[0],
        cfg,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::GenDemos(a) => gen_demos(&ctx, a),
        Command::TrainBc(a) => train_bc_cmd(&ctx, a),
        Command::TrainValue(a) => train_value_cmd(&ctx, a),
        Command::Finetune(a) => finetune_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Ablate => ablate_cmd(ctx),
        Command::Plot(a) => plot_cmd(&ctx, a),
    }
}

fn gen_demos(ctx: &Ctx, a: GenDemos) -> Result<()> {
    let split = if a.holdout { Split::Val } else { Split::Train };
    let mut ds = generate_demos(&variants(&a.variants)?, &Task::ALL, a.n, rftf::harness::demo_seed(ctx.seed, split), split)?;
    if a.state_only {
        ds = export_state_only(&ds);
    }
    let out = ctx.resolve(&a.out);
    write_jsonl(&ds, &out)?;
    println!("wrote {} trajectories to {}", ds.trajectories.len(), out.display());
    Ok(())
}

fn train_bc_cmd(ctx: &Ctx, a: TrainBc) -> Result<()> {
    let train = read_jsonl(&a.demos)?;
    let val = a.val_demos.as_deref().map(read_jsonl).transpose()?;
    let mut cfg = ctx.cfg.bc.clone();
    cfg.seed = ctx.seed;
    if let Some(b) = a.bins {
        cfg.bins_per_dim = b;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let out = train_bc(&train, val.as_ref(), &cfg)?;
    let path = ctx.resolve(&a.out);
    let [(k, v)] = ctx.tags();
    out.policy.save_tagged(&path, ctx.seed, cfg.epochs as u64, &[(k, &v)])?;
    let mut csv = String::from("epoch,train_loss,val_loss,val_top1\n");
    for m in &out.metrics {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.val_loss, m.val_top1));
    }
    ctx.write("bc_metrics.csv", &csv)?;
    let last = out.metrics.last().expect("epoch 0 is always recorded");
    println!("saved {} (val loss {:.4}, val top-1 {:.4})", path.display(), last.val_loss, last.val_top1);
    Ok(())
}

fn train_value_cmd(ctx: &Ctx, a: TrainValue) -> Result<()> {
    let demos = read_jsonl(&a.demos)?;
    let holdout = a.holdout.as_deref().map(read_jsonl).transpose()?;
    let init = a.init_from.as_deref().map(load_policy).transpose()?;
    let mut cfg = ctx.cfg.value.clone();
    cfg.seed = ctx.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let out = train_value_model(&demos, holdout.as_ref(), init.as_ref(), &cfg)?;
    let pattern = if a.out.contains("{n}") {
        a.out.clone()
    } else {
        match a.out.rsplit_once('.') {
            Some((stem, ext)) => format!("{stem}_e{{n}}.{ext}"),
            None => format!("{}_e{{n}}", a.out),
        }
    };
    let [(k, v)] = ctx.tags();
    let mut selected = None;
    for m in &out.per_epoch {
        let path = ctx.resolve(Path::new(&pattern.replace("{n}", &m.epoch.to_string())));
        m.save_tagged(&path, ctx.seed, &[(k, &v)])?;
        selected.get_or_insert(path);
    }
    ctx.write("value_metrics.csv", &value_metrics_csv(&out.metrics))?;
    for m in &out.metrics {
        println!("epoch {}: mean loss {:.4}, held-out pairwise accuracy {:.4}", m.epoch, m.mean_loss, m.holdout_pairwise_accuracy);
    }
    println!("selected checkpoint {}", selected.expect("at least one epoch").display());
    Ok(())
}

fn finetune_cmd(ctx: &Ctx, a: Finetune) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let mut cfg = ctx.cfg.finetune.clone();
    cfg.seed = ctx.seed;
    if let Some(e) = a.episodes {
        cfg.total_episodes = e;
    }
    if let Some(r) = &a.reward {
        cfg.reward = r.parse::<RewardMode>()?;
    }
    let value = match (&a.value, cfg.reward) {
        (Some(p), _) => Some(load_value(p)?),
        (None, RewardMode::Dense) => bail!("configuration error: dense rewards need --value"),
        (None, RewardMode::Sparse) => None,
    };
    let out = finetune(&policy, value.as_ref(), &variants(&a.envs)?, &cfg)?;
    let path = ctx.resolve(&a.out);
    let [(k, v)] = ctx.tags();
    out.policy.save_tagged(&path, ctx.seed, cfg.total_episodes as u64, &[(k, &v)])?;
    ctx.write("metrics.csv", &metrics_csv(&out.metrics))?;
    if let Some(it) = out.halted_at {
        println!("divergence guard halted training at iteration {it}");
    }
    if let Some(m) = out.metrics.last() {
        println!("saved {} after {} episodes (last batch success {:.3}, kl {:.4})", path.display(), m.episodes, m.success_rate, m.mean_kl);
    }
    Ok(())
}

fn eval_cmd(ctx: &Ctx, a: Eval) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let variant: VariantId = a.env.parse()?;
    let mut cfg = ctx.cfg.clone();
    if let Some(n) = a.sequences {
        cfg.eval.n_sequences = n;
    }
    let report = run_eval(&cfg, &policy, ctx.seed, variant)?;
    ctx.write("report.json", &serde_json::to_string_pretty(&report)?)?;
    ctx.write("metrics.csv", &summary_csv(&[&report]))?;
    let s = &report.seeds[0];
    println!("{variant}: avg_len {:.3}, L1..L5 {:.3?}", s.avg_len, s.l);
    Ok(())
}

fn ablate_cmd(ctx: Ctx) -> Result<()> {
    let out = run_experiment(&ctx.cfg, Some(&ctx.out_dir))?;
    let r = &out.report;
    for run in [&r.baseline, &r.generalization, &r.generalization_sparse, &r.adaptation] {
        let reward = run.reward.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
        println!("{:<15} {:<6} mean avg_len {:.3} (std {:.3}) per seed {:.3?}", run.protocol, reward, run.mean_avg_len, run.std_avg_len, run.avg_lens());
    }
    println!("report written to {}", ctx.out_dir.join("report.json").display());
    Ok(())
}

fn plot_cmd(ctx: &Ctx, a: Plot) -> Result<()> {
    let mut inputs = PlotInputs::default();
    if let Some(p) = &a.value_metrics {
        inputs.value_metrics = parse_value_csv(&read_to_string(p)?)?;
    }
    for p in &a.finetune_metrics {
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        inputs.finetune_metrics.push((label, parse_finetune_csv(&read_to_string(p)?)?));
    }
    if let (Some(vp), Some(dp)) = (&a.curve_value, &a.curve_demos) {
        let model = load_value(vp)?;
        let demos = read_jsonl(dp)?;
        let demo = demos.trajectories.iter().find(|t| t.success).context("no successful demo for the value curve")?;
        inputs.value_curve = Some(rftf::value::score_episode(&model, demo)?);
    }
    let written = emit_plots(&ctx.out_dir.join("plots"), &inputs)?;
    if written.is_empty() {
        bail!("nothing to plot: pass --value-metrics, --finetune-metrics or --curve-value");
    }
    for w in written {
        println!("wrote {}", w.display());
    }
    Ok(())
}

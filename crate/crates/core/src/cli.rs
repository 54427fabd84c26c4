//! The `vmd` command-line tool.
//!
//! Every command writes its artifacts plus a `manifest.json` into one output
//! directory. Exit codes: 0 success, 1 usage, 2 data or I/O, 3 numeric
//! failure (non-finite loss, gradient check), 4 failed `--assert-trends`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, run_ablation, AblationSpec, MetricReport, Selection, Variant};
use crate::networks::{LatentMode, VmdModel};
use crate::parallel::Execution;
use crate::rng;
use crate::synthdata::{self, Dataset, GeneratorSpec, Holdout};
use crate::tensor::{op_suite, DIFFERENTIABLE_OPS};
use crate::train::{self, TrainConfig, TrainState};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "vmd", version, about = "Variational multimodal distillation on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run the ablation over objective terms.
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 502)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GeneratorSpec::default().feature_dim)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().report_dim)]
    pub report_dim: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().signal_dims)]
    pub signal_dims: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().mask_noise_dims)]
    pub mask_noise_dims: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().class_balance)]
    pub class_balance: f64,
    #[arg(long, default_value_t = GeneratorSpec::default().noise_scale)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = GeneratorSpec::default().class_separation)]
    pub class_separation: f64,
    #[arg(long, default_value_t = GeneratorSpec::default().report_noise_ratio)]
    pub report_noise_ratio: f64,
    #[arg(long, default_value_t = GeneratorSpec::default().nuisance_ratio)]
    pub nuisance_ratio: f64,
    /// Output directory; receives data.jsonl, data.meta.json, manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// 400 epochs and a 512-wide latent.
    #[arg(long)]
    pub paper_scale: bool,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalBranch {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Classify the latent mean.
    Mean,
    /// Classify one reparameterized latent sample.
    Sample,
}

impl From<EvalMode> for LatentMode {
    fn from(m: EvalMode) -> Self {
        match m {
            EvalMode::Mean => LatentMode::Mean,
            EvalMode::Sample => LatentMode::Sample,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which part of the split to score.
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub split: Subset,
    /// Split file; defaults to `split.json` next to the checkpoint.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalBranch::Student)]
    pub branch: EvalBranch,
    #[arg(long, value_enum, default_value_t = EvalMode::Mean)]
    pub mode: EvalMode,
    /// Seed for `--mode sample`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Exit with code 4 unless the expected ordering of variants holds.
    #[arg(long)]
    pub assert_trends: bool,
    /// Required full − baseline student ROC gap for `--assert-trends`.
    #[arg(long, default_value_t = 0.02)]
    pub min_gap: f64,
    /// Run every job on the calling thread.
    #[arg(long)]
    pub sequential: bool,
    /// Score each branch at its best validation-ROC epoch instead of after
    /// the last epoch.
    #[arg(long)]
    pub best_validation: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check only this op.
    #[arg(long)]
    pub op: Option<String>,
    /// Random instances per op.
    #[arg(long, default_value_t = 10)]
    pub instances: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Skip the full-objective check.
    #[arg(long)]
    pub skip_objective: bool,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub dataset_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: impl Serialize,
    data: Option<&Path>,
    seeds: Vec<u64>,
    outputs: &[&str],
) -> Result<()> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config: serde_json::to_value(config).expect("serializable"),
        dataset_hash: data.map(synthdata::file_hash).transpose()?,
        seeds,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn cmd_synth(a: &SynthArgs) -> Result<String, Failure> {
    let spec = GeneratorSpec {
        n_samples: a.n,
        feature_dim: a.feature_dim,
        report_dim: a.report_dim,
        signal_dims: a.signal_dims,
        mask_noise_dims: a.mask_noise_dims,
        class_balance: a.class_balance,
        noise_scale: a.noise_scale,
        seed: a.seed,
        class_separation: a.class_separation,
        report_noise_ratio: a.report_noise_ratio,
        nuisance_ratio: a.nuisance_ratio,
    };
    let data = synthdata::generate(&spec)?;
    let path = a.out.join("data.jsonl");
    synthdata::save(&data, &path, Some(&spec))?;
    write_manifest(&a.out, "synth", &spec, Some(&path), vec![a.seed], &["data.jsonl", "data.meta.json"])?;
    let positives = data.labels().iter().filter(|&&l| l == 1).count();
    Ok(format!("wrote {} samples ({positives} vulnerable) to {}\n", data.len(), path.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<String, Failure> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.paper_scale {
        cfg = cfg.full_scale();
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.train.validate()?;
    let data = synthdata::load(&a.data)?;
    let split = cfg.split.split(&data, cfg.train.seed)?;
    let model_cfg = cfg.model.for_data(&data)?;
    let state = match &a.resume {
        Some(path) => train::load_state(path, Some(&model_cfg))?,
        None => TrainState::fresh(VmdModel::new(model_cfg, cfg.train.seed)?),
    };
    let train_cfg = TrainConfig {
        checkpoint_dir: (cfg.train.checkpoint_every > 0).then(|| a.out.join("checkpoints")),
        ..cfg.train.clone()
    };
    let (state, log) = train::train_from(state, &data, &split, &train_cfg, &mut |_| {})?;

    write_json(&a.out.join("split.json"), &split)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    write_text(&a.out.join("train_log.jsonl"), &log.to_jsonl())?;
    write_text(&a.out.join("timing.jsonl"), &log.timings_jsonl())?;
    train::save_state(&a.out.join("final.ckpt"), &state, &train_cfg)?;
    write_manifest(
        &a.out,
        "train",
        &cfg,
        Some(&a.data),
        vec![cfg.train.seed],
        &["split.json", "config.toml", "train_log.jsonl", "timing.jsonl", "final.ckpt"],
    )?;
    let last = log.epochs.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} epochs ({} steps), final loss {last:.6}; outputs in {}\n",
        log.epochs.len(),
        state.adam.step,
        a.out.display()
    ))
}

fn subset_indices(a: &EvalArgs, data: &Dataset) -> Result<Vec<usize>> {
    if a.split == Subset::All {
        return Ok((0..data.len()).collect());
    }
    let path = a.split_file.clone().unwrap_or_else(|| {
        a.checkpoint.parent().unwrap_or(Path::new(".")).join("split.json")
    });
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let split: Holdout = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&path, format!("line {}, column {}", e.line(), e.column()), e.to_string()))?;
    let idx = match a.split {
        Subset::Train => split.train,
        Subset::Val => split.val,
        Subset::Test => split.test,
        Subset::All => unreachable!(),
    };
    if let Some(i) = idx.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Dimension(format!("split index {i} exceeds the {} samples", data.len())));
    }
    Ok(idx)
}

#[derive(Serialize)]
struct EvalOutput {
    branch: EvalBranch,
    split: Subset,
    mode: EvalMode,
    n: usize,
    metrics: MetricReport,
    roc_error: Option<String>,
}

fn metrics_text(m: &MetricReport) -> String {
    let roc = m.roc_auc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let c = m.confusion;
    format!(
        "ROC        {roc}\nAccuracy   {:.4}\nPrecision  {:.4}\nRecall     {:.4}\nFbeta      {:.4}\nTP {}  FN {}  FP {}  TN {}\n",
        m.accuracy, m.precision, m.recall, m.fbeta, c.tp, c.fn_, c.fp, c.tn
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<String, Failure> {
    let state = train::load_state(&a.checkpoint, None)?;
    let data = synthdata::load(&a.data)?;
    let idx = subset_indices(a, &data)?;
    if idx.is_empty() {
        return Err(usage(format!("the {:?} split is empty", a.split)));
    }
    let batch = data.batch(&idx)?;
    let mut rng = rng::stream(a.seed, "eval.sample");
    let mode = LatentMode::from(a.mode);
    let rng = (a.mode == EvalMode::Sample).then_some(&mut rng);
    let probs = match a.branch {
        EvalBranch::Student => eval::infer_student(&state.model, &batch.x_s, mode, rng)?,
        EvalBranch::Teacher => eval::infer_teacher(&state.model, &batch.x_t, mode, rng)?,
    };
    let scores = probs.positive_scores();
    let metrics = eval::compute_metrics(&scores, &batch.labels, eval::DEFAULT_THRESHOLD, eval::DEFAULT_BETA)?;
    let roc_error = eval::roc_auc(&scores, &batch.labels).err().map(|e| e.to_string());
    if let Some(e) = &roc_error {
        eprintln!("warning: {e}");
    }
    let text = metrics_text(&metrics);
    let out = EvalOutput { branch: a.branch, split: a.split, mode: a.mode, n: idx.len(), metrics, roc_error };
    write_json(&a.out.join("metrics.json"), &out)?;
    write_text(&a.out.join("metrics.txt"), &text)?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "split": a.split, "branch": a.branch, "mode": a.mode,
    });
    write_manifest(&a.out, "eval", config, Some(&a.data), vec![a.seed], &["metrics.json", "metrics.txt"])?;
    Ok(text)
}

fn cmd_ablate(a: &AblateArgs) -> Result<String, Failure> {
    if a.assert_trends && a.seeds.len() < 2 {
        return Err(usage("--assert-trends needs at least two seeds"));
    }
    let cfg = load_config(a.config.as_deref())?;
    let data = synthdata::load(&a.data)?;
    let spec = AblationSpec {
        variants: Variant::standard(),
        selection: if a.best_validation { Selection::BestValidation } else { Selection::Final },
        model: cfg.model.clone(),
        train: TrainConfig { eval_every: 0, ..cfg.train.clone() },
        split: cfg.split,
        exec: if a.sequential { Execution::Sequential } else { Execution::Parallel },
    };
    let table = run_ablation(&spec, &data, &a.seeds)?;
    let text = table.to_text();
    write_text(&a.out.join("ablation.json"), &table.to_json())?;
    write_text(&a.out.join("ablation.txt"), &text)?;
    write_manifest(&a.out, "ablate", &spec, Some(&a.data), a.seeds.clone(), &["ablation.json", "ablation.txt"])?;
    let checks = table.trend_checks(a.min_gap);
    let mut report = text;
    for c in &checks {
        report.push_str(&format!("{} {}\n", if c.holds { "ok  " } else { "FAIL" }, c.claim));
    }
    if a.assert_trends && checks.iter().any(|c| !c.holds) {
        return Err(Failure { code: 4, message: format!("{report}trend assertion failed") });
    }
    Ok(report)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<String, Failure> {
    let suite = op_suite();
    let selected: Vec<_> = match &a.op {
        Some(name) => {
            let found: Vec<_> = suite.iter().filter(|c| c.name == name).copied().collect();
            if found.is_empty() {
                return Err(usage(format!("unknown op {name}; known ops: {}", DIFFERENTIABLE_OPS.join(", "))));
            }
            found
        }
        None => suite,
    };
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for check in &selected {
        let mut err = 0.0f64;
        for seed in 0..a.instances {
            err = err.max((check.run)(seed, a.eps)?);
        }
        worst = worst.max(err);
        lines.push(format!("{:<18} {err:.3e}", check.name));
    }
    if a.op.is_none() && !a.skip_objective {
        let mut err = 0.0f64;
        for seed in 0..a.instances.min(3) {
            err = err.max(train::objective_gradient_check(seed, a.eps, Execution::Parallel)?);
        }
        worst = worst.max(err);
        lines.push(format!("{:<18} {err:.3e}", "objective"));
    }
    let report = lines.join("\n") + "\n";
    if worst >= GRADCHECK_TOLERANCE {
        return Err(Failure { code: 3, message: format!("{report}max relative error {worst:.3e} ≥ {GRADCHECK_TOLERANCE:e}") });
    }
    Ok(report)
}

pub fn run(cli: &Cli) -> Result<String, Failure> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `args` (program name first), runs the command, prints its report,
/// and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

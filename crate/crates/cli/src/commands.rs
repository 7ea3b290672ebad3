use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cvrlab::augment::AugmentConfig;
use cvrlab::gradsuite::gradient_suite;
use cvrlab::numerics::gradcheck::{run_cases, GradReport, GradcheckOptions};
use cvrlab::numerics::{checkpoint, Fault, NumericsError};
use cvrlab::parm::{ContextMode, EvalPermutation, ParmConfig};
use cvrlab::perception::EncoderConfig;
use cvrlab::taskgen::dataset::{load_split, read_info};
use cvrlab::taskgen::{generate_to_dir, lookup_rule, Panel, Resolution, Split, TaskGenError};
use cvrlab::trainer::{
    ablate, evaluate, grid_cells, train_from, write_report_csv, AblationGrid, HeadKind, Metrics, Model, ModelConfig,
    TrainConfig, TrainError, Views,
};
use cvrlab::Scalar;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::manifest::RunManifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl From<TaskGenError> for CliError {
    fn from(e: TaskGenError) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::ParamMismatch(_) | NumericsError::Shape { .. } => CliError::Usage(e.to_string()),
            NumericsError::Checkpoint(_) | NumericsError::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Augment(_) => CliError::Usage(e.to_string()),
            TrainError::EmptyDataset(_) => CliError::Data(e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Numerics(n) => n.into(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "cvrlab", version, about = "Odd-one-out panel generation, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test panel directories.
    Gen(GenArgs),
    /// Train a model and write checkpoint.bin, model.json and history.csv.
    Train(TrainArgs),
    /// Evaluate a trained model on one split.
    Eval(EvalArgs),
    /// Run an ablation grid and write report.csv.
    Ablate(AblateArgs),
    /// Finite-difference check of every operation and both losses.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    /// Comma-separated rule names.
    #[arg(long, value_delimiter = ',', required = true)]
    rules: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Parm,
    PooledMlp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ViewsArg {
    Both,
    WdaOnly,
    SdaOnly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ContextArg {
    Three,
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PermArg {
    Canonical,
    AverageAll,
}

#[derive(Debug, Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Number of stacked reasoning blocks.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder stage widths; each stage halves the resolution.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,64")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    #[arg(long, value_enum, default_value_t = HeadArg::Parm)]
    head: HeadArg,
    /// Drop the contrastive loss.
    #[arg(long)]
    no_acl: bool,
    #[arg(long, value_enum, default_value_t = ViewsArg::Both)]
    views: ViewsArg,
    #[arg(long, value_enum, default_value_t = ContextArg::Both)]
    context_mode: ContextArg,
    #[arg(long, value_enum, default_value_t = PermArg::AverageAll)]
    eval_permutation: PermArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Use sigmoid(label) as BCE targets.
    #[arg(long)]
    bce_literal: bool,
    #[arg(long, default_value_t = 0.5)]
    p_w: f64,
    #[arg(long, default_value_t = 36.0)]
    hue_shift_max: f64,
    #[arg(long, default_value_t = 0.1)]
    shift_max: f64,
    #[arg(long, default_value_t = 8)]
    sda_grid: usize,
    #[arg(long, default_value_t = 0.25)]
    sda_mask_ratio: f64,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long, default_value_t = 64)]
    eval_batch_size: usize,
    /// Write 0 in the seconds column so histories are byte-stable.
    #[arg(long)]
    no_wall_time: bool,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

impl TrainOpts {
    fn config(&self, resolution: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            model: ModelConfig {
                encoder: EncoderConfig {
                    widths: self.widths.clone(),
                    embed_dim: self.embed_dim,
                    resolution,
                },
                parm: ParmConfig {
                    k: self.k,
                    context_mode: match self.context_mode {
                        ContextArg::Three => ContextMode::Three,
                        ContextArg::Two => ContextMode::Two,
                        ContextArg::Both => ContextMode::Both,
                    },
                    eval_permutation: match self.eval_permutation {
                        PermArg::Canonical => EvalPermutation::Canonical,
                        PermArg::AverageAll => EvalPermutation::AverageAll,
                    },
                    lambda: self.lambda,
                    bce_literal: self.bce_literal,
                },
                head: match self.head {
                    HeadArg::Parm => HeadKind::Parm,
                    HeadArg::PooledMlp => HeadKind::PooledMlp,
                },
            },
            augment: AugmentConfig {
                p_w: self.p_w,
                hue_shift_max: self.hue_shift_max,
                shift_max: self.shift_max,
                sda_grid: self.sda_grid,
                sda_mask_ratio: self.sda_mask_ratio,
            },
            views: match self.views {
                ViewsArg::Both => Views::Both,
                ViewsArg::WdaOnly => Views::WeakOnly,
                ViewsArg::SdaOnly => Views::StrongOnly,
            },
            contrastive: !self.no_acl,
            acl_temperature: self.temperature,
            eval_batch_size: self.eval_batch_size,
            target_accuracy: self.target_accuracy,
            wall_time: !self.no_wall_time,
            detach_contrastive: false,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory holding `train/` and `val/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory; defaults to `<run>/eval-<split>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// components, augment, k, lambda or single.
    #[arg(long)]
    grid: AblationGrid,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
    /// Corrupt one backward rule to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Contents of `model.json` next to a checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    dtype: Dtype,
    model: ModelConfig,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`, in which
/// case its previous contents are removed.
fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() {
            if !force {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty (pass --force to overwrite)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    } else if dir.exists() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn print_json(v: &impl Serialize) {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).expect("stdout json");
    let _ = writeln!(out);
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let rules = a
        .rules
        .iter()
        .map(|r| lookup_rule(r.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let res = Resolution::new(a.res)?;
    prepare_out(&a.out, a.force)?;
    let mut manifest = RunManifest::new("gen", serde_json::to_value(&a).expect("args serialize"));
    manifest.write(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut counts = serde_json::Map::new();
    for (split, n) in [(Split::Train, a.n_train), (Split::Val, a.n_val), (Split::Test, a.n_test)] {
        let dir = a.out.join(split.name());
        generate_to_dir(&dir, &rules, n, split, a.seed, res)?;
        manifest.hash_split(split.name(), &dir).map_err(|e| io_err(&dir, e))?;
        counts.insert(split.name().into(), json!(n * rules.len()));
        eprintln!("{:<6} {:>7} panels", split.name(), n * rules.len());
    }
    manifest.write(&a.out).map_err(|e| io_err(&a.out, e))?;
    print_json(&json!({ "out": a.out, "panels": counts, "datasets": manifest.datasets }));
    Ok(())
}

fn load(dir: &Path) -> Result<(usize, Vec<Panel>), CliError> {
    let (info, panels) = load_split(dir)?;
    Ok((info.resolution, panels))
}

fn load_train_val(data: &Path) -> Result<(usize, Vec<Panel>, Vec<Panel>), CliError> {
    let (res, train) = load(&data.join("train"))?;
    let (val_res, val) = load(&data.join("val"))?;
    if res != val_res {
        return Err(CliError::Data(format!(
            "train resolution {res} differs from validation resolution {val_res}"
        )));
    }
    Ok((res, train, val))
}

fn epoch_header() {
    eprintln!("{:>5} {:>10} {:>10} {:>10} {:>8} {:>9}", "epoch", "L", "L_BCE", "L_C", "val_acc", "seconds");
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    // Validate everything cheap before touching the output directory.
    let info = read_info(&a.data.join("train"))?;
    let cfg = a.opts.config(info.resolution);
    cfg.validate()?;
    let (res, train, val) = load_train_val(&a.data)?;
    let cfg = a.opts.config(res);
    prepare_out(&a.out, a.force)?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg).expect("config serializes"));
    for s in ["train", "val"] {
        let dir = a.data.join(s);
        manifest.hash_split(s, &dir).map_err(|e| io_err(&dir, e))?;
    }
    manifest.write(&a.out).map_err(|e| io_err(&a.out, e))?;
    match a.opts.dtype {
        Dtype::F32 => train_typed::<f32>(&cfg, Dtype::F32, &train, &val, &a.out),
        Dtype::F64 => train_typed::<f64>(&cfg, Dtype::F64, &train, &val, &a.out),
    }
}

fn train_typed<T: Scalar>(
    cfg: &TrainConfig,
    dtype: Dtype,
    train: &[Panel],
    val: &[Panel],
    out: &Path,
) -> Result<(), CliError> {
    let model_file = ModelFile {
        dtype,
        model: cfg.model.clone(),
    };
    let mut text = serde_json::to_string_pretty(&model_file).expect("model serializes");
    text.push('\n');
    write_file(&out.join("model.json"), text.as_bytes())?;

    let model = Model::<T>::new(cfg.model.clone(), cfg.init_seed()).map_err(CliError::Usage)?;
    epoch_header();
    let outcome = train_from(model, cfg, train, val, |r, _| {
        eprintln!(
            "{:>5} {:>10.5} {:>10.5} {:>10.5} {:>8.4} {:>9.1}",
            r.epoch, r.loss, r.bce, r.contrastive, r.val_accuracy, r.seconds
        );
    })?;
    let ckpt = out.join("checkpoint.bin");
    checkpoint::save(&outcome.model.store, &ckpt)?;
    let mut csv = Vec::new();
    outcome.history.write_csv(&mut csv).expect("in-memory write");
    write_file(&out.join("history.csv"), &csv)?;
    print_json(&json!({
        "checkpoint": ckpt,
        "epochs_run": outcome.history.records.len(),
        "best_epoch": outcome.history.best_epoch,
        "best_val_accuracy": outcome.history.best_val_accuracy,
        "stop": outcome.history.stop,
    }));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let model_path = a.run.join("model.json");
    let text = fs::read_to_string(&model_path).map_err(|e| io_err(&model_path, e))?;
    let model_file: ModelFile =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", model_path.display())))?;
    let split_dir = a.data.join(&a.split);
    let (res, panels) = load(&split_dir)?;
    if res != model_file.model.encoder.resolution {
        return Err(CliError::Usage(format!(
            "dataset resolution {res} does not match the model's {}",
            model_file.model.encoder.resolution
        )));
    }
    let metrics = match model_file.dtype {
        Dtype::F32 => eval_typed::<f32>(&model_file.model, &a.run, &panels, a.batch_size)?,
        Dtype::F64 => eval_typed::<f64>(&model_file.model, &a.run, &panels, a.batch_size)?,
    };
    let out = a.out.unwrap_or_else(|| a.run.join(format!("eval-{}", a.split)));
    prepare_out(&out, a.force)?;
    let mut manifest = RunManifest::new("eval", json!({ "run": a.run, "split": a.split, "model": model_file.model }));
    manifest.hash_split(&a.split, &split_dir).map_err(|e| io_err(&split_dir, e))?;
    manifest.write(&out).map_err(|e| io_err(&out, e))?;
    let mut text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    text.push('\n');
    write_file(&out.join("metrics.json"), text.as_bytes())?;

    eprintln!("{:<24} {:>7} {:>9}", "rule", "panels", "accuracy");
    for (rule, m) in &metrics.per_rule {
        eprintln!("{:<24} {:>7} {:>9.4}", rule, m.panels, m.accuracy);
    }
    eprintln!("{:<24} {:>7} {:>9.4}", "overall", metrics.panels, metrics.accuracy);
    print_json(&metrics);
    Ok(())
}

fn eval_typed<T: Scalar>(cfg: &ModelConfig, run: &Path, panels: &[Panel], batch: usize) -> Result<Metrics, CliError> {
    let mut model = Model::<T>::new(cfg.clone(), 0).map_err(CliError::Usage)?;
    let params = checkpoint::load::<T>(&run.join("checkpoint.bin"))?;
    model.load_params(&params)?;
    Ok(evaluate(&model, panels, batch.max(1))?)
}

fn cmd_ablate(a: AblateArgs) -> Result<(), CliError> {
    if a.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let info = read_info(&a.data.join("train"))?;
    a.opts.config(info.resolution).validate()?;
    let (res, train, val) = load_train_val(&a.data)?;
    let (test_res, test) = load(&a.data.join("test"))?;
    if test_res != res {
        return Err(CliError::Data(format!("test resolution {test_res} differs from train resolution {res}")));
    }
    let base = a.opts.config(res);
    let cells = grid_cells(&base, a.grid);
    prepare_out(&a.out, a.force)?;
    let mut manifest = RunManifest::new(
        "ablate",
        json!({ "grid": a.grid, "seeds": a.seeds, "base": base }),
    );
    for s in ["train", "val", "test"] {
        let dir = a.data.join(s);
        manifest.hash_split(s, &dir).map_err(|e| io_err(&dir, e))?;
    }
    manifest.write(&a.out).map_err(|e| io_err(&a.out, e))?;
    eprintln!("{:<12} {:>6} {:>8} {:>8} {:>8}", "cell", "seed", "epochs", "val_acc", "test_acc");
    let on_row = |r: &cvrlab::trainer::ReportRow| {
        eprintln!(
            "{:<12} {:>6} {:>8} {:>8.4} {:>8.4}",
            r.cell, r.seed, r.epochs_run, r.val_accuracy, r.test_accuracy
        )
    };
    let rows = match a.opts.dtype {
        Dtype::F32 => ablate::<f32>(&cells, &a.seeds, &train, &val, &test, on_row)?,
        Dtype::F64 => ablate::<f64>(&cells, &a.seeds, &train, &val, &test, on_row)?,
    };
    let mut csv = Vec::new();
    write_report_csv(&mut csv, &rows).expect("in-memory write");
    write_file(&a.out.join("report.csv"), &csv)?;
    print_json(&rows);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("conv2d") => Some(Fault::Conv2dWeightGrad),
        Some(other) => return Err(CliError::Usage(format!("unknown fault `{other}` (expected conv2d)"))),
    };
    let report: GradReport = match a.dtype {
        Dtype::F32 => run_cases(&gradient_suite::<f32>(), &GradcheckOptions { fault, ..GradcheckOptions::single() }),
        Dtype::F64 => run_cases(&gradient_suite::<f64>(), &GradcheckOptions { fault, ..GradcheckOptions::double() }),
    };
    eprintln!("{:<14} {:>12} {:>6}", "op", "max_rel_err", "status");
    for c in &report.cases {
        eprintln!(
            "{:<14} {:>12.3e} {:>6}",
            c.name,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let cases: Vec<_> = report
        .cases
        .iter()
        .map(|c| json!({ "op": c.name, "max_rel_error": c.max_rel_error, "passed": c.passed, "error": c.error }))
        .collect();
    print_json(&json!({ "dtype": report.dtype, "tolerance": report.tolerance, "passed": report.passed(), "cases": cases }));
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        Err(CliError::Numeric(format!("gradient check failed for: {}", names.join(", "))))
    }
}

//! Command-line front end: dataset generation, training, ablation sweeps and
//! evaluation.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use allmatch::metrics::{ablation_report, Flags, RunSummary};
use allmatch::model::{Architecture, Checkpoint, PointClassifier};
use allmatch::pcdata::{load_dataset, make_dataset, save_dataset, DatasetConfig};
use allmatch::trainer::{evaluate, run, RunReport, TrainConfig, REPORT_FILE};
use allmatch::{Error, Result};
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => EXIT_IO,
        Error::Diverged { .. } => EXIT_DIVERGED,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "allmatch",
    version,
    about = "Semi-supervised point-cloud classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Train one run per seed.
    Train(TrainArgs),
    /// Run every on/off combination of the three contributions.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub points: usize,
    #[arg(long, default_value_t = 0.02)]
    pub labeled_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base profile (full or desk); same as `profile = ...` in the file.
    #[arg(long)]
    pub profile: Option<String>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub no_aha: bool,
    #[arg(long)]
    pub no_inverse: bool,
    #[arg(long)]
    pub no_contrastive: bool,
    #[arg(long)]
    pub no_supcon: bool,
    /// Comma-separated seeds; several seeds run into `seed_<s>/` subdirectories.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Continue a single-seed run from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of seeds per combination, counting up from `train.seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Messages go to stdout, errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<String> {
    let d = make_dataset(&DatasetConfig {
        classes: a.classes,
        per_class: a.per_class,
        test_per_class: a.test_per_class,
        points: a.points,
        labeled_fraction: a.labeled_frac,
        seed: a.seed,
    })?;
    save_dataset(&d, &a.out)?;
    Ok(format!(
        "wrote {}: {} classes, {} labelled, {} unlabelled, {} test",
        a.out.display(),
        d.classes,
        d.labeled.len(),
        d.unlabeled.len(),
        d.test.len()
    ))
}

fn resolve_config(a: &RunArgs) -> Result<TrainConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = &a.profile {
        overrides.push(format!("profile={p}"));
    }
    overrides.extend(a.set.iter().cloned());
    let cfg = config::load(a.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let s =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, s + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let mut cfg = resolve_config(&a.run)?;
    cfg.use_aha &= !a.no_aha;
    cfg.use_inverse &= !a.no_inverse;
    cfg.use_contrastive &= !a.no_contrastive;
    cfg.use_supcon &= !a.no_supcon;
    let data = load_dataset(&a.run.data)?;
    let seeds = if a.seed.is_empty() {
        vec![cfg.seed]
    } else {
        a.seed.clone()
    };
    if seeds.len() > 1 && a.resume.is_some() {
        return Err(Error::Config(
            "--resume works with a single seed only".into(),
        ));
    }
    if seeds.len() == 1 {
        cfg.seed = seeds[0];
        let r = run(&cfg, &data, &a.run.out, a.resume.as_deref())?;
        return Ok(format!(
            "{}: final OA {:.4}, best OA {:.4} (epoch {}), mean util_any {:.3}",
            a.run.out.display(),
            r.final_oa,
            r.best_oa,
            r.best_epoch,
            r.mean_util_any
        ));
    }
    let mut summaries = Vec::new();
    let mut lines = Vec::new();
    for s in seeds {
        cfg.seed = s;
        let dir = a.run.out.join(format!("seed_{s}"));
        let r = run(&cfg, &data, &dir, None)?;
        lines.push(format!(
            "seed {s}: final OA {:.4}, best OA {:.4}",
            r.final_oa, r.best_oa
        ));
        summaries.push(r.summary());
    }
    let rep = ablation_report(&summaries)?;
    fs::create_dir_all(&a.run.out).map_err(|e| Error::Io {
        path: a.run.out.clone(),
        source: e,
    })?;
    write_text(&a.run.out.join("summary.md"), &rep.to_markdown())?;
    write_json(&a.run.out.join("summary.json"), &rep)?;
    lines.push(rep.to_markdown());
    Ok(lines.join("\n"))
}

/// Output directory name of one sweep member.
pub fn ablation_dir(flags: Flags, seed: u64) -> String {
    format!("{}_seed{seed}", flags.label())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<String> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let base = resolve_config(&a.run)?;
    let data = load_dataset(&a.run.data)?;
    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut log = Vec::new();
    for flags in Flags::table_order() {
        for i in 0..a.seeds {
            let mut cfg = base.clone();
            cfg.set_flags(flags);
            cfg.seed = base.seed + i;
            let dir = a.run.out.join(ablation_dir(flags, cfg.seed));
            let report_path = dir.join(REPORT_FILE);
            let r = match RunReport::load(&report_path) {
                Ok(r) if r.config == cfg => {
                    log.push(format!("{}: already complete", dir.display()));
                    r
                }
                _ => {
                    let r = run(&cfg, &data, &dir, None)?;
                    log.push(format!("{}: final OA {:.4}", dir.display(), r.final_oa));
                    r
                }
            };
            summaries.push(r.summary());
        }
    }
    let rep = ablation_report(&summaries)?;
    write_text(&a.run.out.join("ablation.md"), &rep.to_markdown())?;
    write_json(&a.run.out.join("ablation.json"), &rep)?;
    log.push(rep.to_markdown());
    Ok(log.join("\n"))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let data = load_dataset(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let dim = |name: &str| {
        ck.get(name)
            .and_then(|t| t.shape.last().copied())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    };
    let classes = dim("head.bias")?;
    if classes != data.classes as usize {
        return Err(Error::Config(format!(
            "checkpoint has {classes} classes but the dataset has {}",
            data.classes
        )));
    }
    let model =
        PointClassifier::from_checkpoint(Architecture::new(classes, dim("proj.bias")?), &ck)?;
    let e = evaluate(&model, &data.test)?;
    let out = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "epoch": ck.epoch,
        "overall_acc": e.overall,
        "mean_acc": e.mean,
        "confusion": e.confusion.counts,
    });
    serde_json::to_string_pretty(&out).map_err(|e| Error::InvalidArgument(e.to_string()))
}

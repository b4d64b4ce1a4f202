//! Command-line front end: `gen-data`, `train`, `eval`, `attribute`, `ablate`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bagio::{generate_cohort, read_cohort, write_cohort, Cohort, ScmConfig, Split};
use crate::error::{Error, Result};
use crate::evalmetrics::{predictions_csv, write_report, BagAttribution};
use crate::scmgraph::{load_checkpoint, save_checkpoint, GraphVariant};
use crate::trainer::{evaluate, train, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.mcck";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(
    name = "causal-mil",
    version,
    about = "Causality-aware multiple instance learning on feature bags"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic cohort and write it to disk.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, log and provenance record.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Per-bag demographic attribution scores as CSV.
    Attribute(AttributeArgs),
    /// Train several graph variants over several seeds and tabulate them.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator config as JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Demographic confounding strength.
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    /// Feature noise standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub bags: Option<usize>,
    /// Instances per bag.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub survival: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Cohort directory or manifest.
    #[arg(long)]
    pub cohort: PathBuf,
    /// Training config as JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<GraphVariant>,
    /// Set the fairness weight to zero.
    #[arg(long)]
    pub no_fair_loss: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train the Cox risk head instead of the classifier.
    #[arg(long)]
    pub survival: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Checkpoint file or a run directory containing one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write one `instance_index,alpha` CSV per bag.
    #[arg(long)]
    pub dump_attention: bool,
    #[arg(long)]
    pub dump_predictions: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Factor {
    All,
    Gender,
    Race,
    Age,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value = "all")]
    pub factor: Factor,
    /// CSV destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated graph variants.
    #[arg(long, value_delimiter = ',', default_values_t = GraphVariant::ALL.to_vec())]
    pub variants: Vec<GraphVariant>,
    /// Number of training seeds, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_fair_loss: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps an error to the process exit status: 2 for usage and config
/// problems, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Io { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Attribute(a) => cmd_attribute(&a),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_cohort(path: &Path) -> Result<Cohort> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "cohort {} does not exist",
            path.display()
        )));
    }
    read_cohort(path)
}

fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn scm_config(a: &GenDataArgs) -> Result<ScmConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => ScmConfig::default(),
    };
    if let Some(v) = a.gamma {
        cfg.confounding = v;
    }
    if let Some(v) = a.sigma {
        cfg.noise = v;
    }
    if let Some(v) = a.bags {
        cfg.n_bags = v;
    }
    if let Some(v) = a.k {
        cfg.instances = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if a.survival {
        cfg.survival = true;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Cohort> {
    let cfg = scm_config(a)?;
    let cohort = generate_cohort(&cfg)?;
    let manifest = write_cohort(&cohort, &a.out, Some(&cfg))?;
    log::info!("wrote {} bags to {}", cohort.len(), manifest.display());
    Ok(cohort)
}

fn train_config(config: Option<&Path>) -> Result<TrainConfig> {
    match config {
        Some(p) => read_json(p),
        None => Ok(TrainConfig::default()),
    }
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = train_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if a.no_fair_loss {
        cfg.weights.lambda_fair = 0.0;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if a.survival {
        cfg.survival = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    cohort: String,
    config: &'a TrainConfig,
    seed: u64,
    git_describe: String,
    started_unix: u64,
    wall_seconds: f64,
    epochs_run: usize,
    best_epoch: usize,
    best_score: f64,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let cohort = load_cohort(&a.cohort)?;
    let started = unix_now();
    let clock = Instant::now();
    let outcome = train(&cohort, &cfg)?;
    create_dir(&a.out)?;
    save_checkpoint(&outcome.model, &a.out.join(CHECKPOINT_FILE))?;
    write_text(&a.out.join(TRAIN_LOG_FILE), &outcome.log_jsonl()?)?;
    let record = RunRecord {
        command: "train",
        cohort: a.cohort.display().to_string(),
        config: &cfg,
        seed: cfg.seed,
        git_describe: git_describe(),
        started_unix: started,
        wall_seconds: clock.elapsed().as_secs_f64(),
        epochs_run: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_score: outcome.best_score,
    };
    write_text(
        &a.out.join(RUN_FILE),
        &(serde_json::to_string_pretty(&record)? + "\n"),
    )?;
    println!(
        "trained {} for {} epochs, best epoch {} score {:.4}",
        cfg.variant,
        outcome.log.len(),
        outcome.best_epoch,
        outcome.best_score
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let split = Split::parse(&a.split)?;
    let cohort = load_cohort(&a.cohort)?;
    let model = load_checkpoint(&checkpoint_path(&a.checkpoint), None)?;
    let ev = evaluate(&model, &cohort, split)?;
    create_dir(&a.out)?;
    write_report(
        &ev.report,
        &a.out.join(format!("report_{}.json", split.name())),
    )?;
    if a.dump_predictions {
        let csv = predictions_csv(&ev.records, cohort.class_count)?;
        write_text(
            &a.out.join(format!("predictions_{}.csv", split.name())),
            &csv,
        )?;
    }
    if a.dump_attention {
        let dir = a.out.join("attention");
        create_dir(&dir)?;
        for (bag_id, alpha) in &ev.attention {
            let mut csv = String::from("instance_index,alpha\n");
            for (i, w) in alpha.iter().enumerate() {
                writeln!(csv, "{i},{w:?}").unwrap();
            }
            write_text(&dir.join(format!("{bag_id}.csv")), &csv)?;
        }
    }
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} bags: acc {} auc {} f1 {} c-index {} gdv(gender) {}",
        ev.report.n_bags,
        show(ev.report.acc),
        show(ev.report.auc),
        show(ev.report.f1),
        show(ev.report.c_index),
        show(ev.report.gdv.get("gender").copied().flatten())
    );
    Ok(())
}

pub fn attribution_csv(rows: &[BagAttribution], factor: Factor) -> String {
    let cols: &[&str] = match factor {
        Factor::All => &["total", "gender", "race", "age"],
        Factor::Gender => &["gender"],
        Factor::Race => &["race"],
        Factor::Age => &["age"],
    };
    let mut out = format!("bag_id,{}\n", cols.join(","));
    for r in rows {
        out.push_str(&r.bag_id);
        for c in cols {
            let v = match *c {
                "total" => r.total,
                "gender" => r.gender,
                "race" => r.race,
                _ => r.age,
            };
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cmd_attribute(a: &AttributeArgs) -> Result<()> {
    let split = Split::parse(&a.split)?;
    let cohort = load_cohort(&a.cohort)?;
    let model = load_checkpoint(&checkpoint_path(&a.checkpoint), None)?;
    let ev = evaluate(&model, &cohort, split)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&a.out, &attribution_csv(&ev.attributions, a.factor))?;
    println!(
        "wrote attribution for {} bags to {}",
        ev.attributions.len(),
        a.out.display()
    );
    Ok(())
}

/// One trained model in an ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub variant: GraphVariant,
    pub seed: u64,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub gdv_gender: Option<f64>,
    pub c_index: Option<f64>,
}

/// Seed means per variant. Metrics missing on any seed are reported as missing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: GraphVariant,
    pub seeds: usize,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub gdv_gender: Option<f64>,
    pub c_index: Option<f64>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains every variant for every seed on `cohort` and scores the test split.
pub fn run_ablation(
    cohort: &Cohort,
    base: &TrainConfig,
    variants: &[GraphVariant],
    seeds: &[u64],
) -> Result<(Vec<AblationRow>, Vec<AblationRun>)> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &variant in variants {
        let start = runs.len();
        for &seed in seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let model = train(cohort, &cfg)?.model;
            let report = evaluate(&model, cohort, Split::Test)?.report;
            let run = AblationRun {
                variant,
                seed,
                acc: report.acc,
                auc: report.auc,
                gdv_gender: report.gdv.get("gender").copied().flatten(),
                c_index: report.c_index,
            };
            log::info!("{variant} seed {seed}: {run:?}");
            runs.push(run);
        }
        let done = &runs[start..];
        rows.push(AblationRow {
            variant,
            seeds: done.len(),
            acc: mean_opt(done.iter().map(|r| r.acc)),
            auc: mean_opt(done.iter().map(|r| r.auc)),
            gdv_gender: mean_opt(done.iter().map(|r| r.gdv_gender)),
            c_index: mean_opt(done.iter().map(|r| r.c_index)),
        });
    }
    Ok((rows, runs))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seeds,acc,auc,gdv_gender,c_index\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant,
            r.seeds,
            cell(r.acc),
            cell(r.auc),
            cell(r.gdv_gender),
            cell(r.c_index)
        )
        .unwrap();
    }
    out
}

pub fn ablation_runs_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from("variant,seed,acc,auc,gdv_gender,c_index\n");
    for r in runs {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant,
            r.seed,
            cell(r.acc),
            cell(r.auc),
            cell(r.gdv_gender),
            cell(r.c_index)
        )
        .unwrap();
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let mut out = format!(
        "{:<10} {:>5} {:>8} {:>8} {:>12}\n",
        "variant", "seeds", "ACC", "AUC", "GDV(gender)"
    );
    for r in rows {
        writeln!(
            out,
            "{:<10} {:>5} {:>8} {:>8} {:>12}",
            r.variant.name(),
            r.seeds,
            show(r.acc),
            show(r.auc),
            show(r.gdv_gender)
        )
        .unwrap();
    }
    out
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<AblationRow>> {
    let mut base = train_config(a.config.as_deref())?;
    if a.no_fair_loss {
        base.weights.lambda_fair = 0.0;
    }
    if let Some(v) = a.epochs {
        base.epochs = v;
    }
    base.validate()?;
    let cohort = load_cohort(&a.cohort)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let (rows, runs) = run_ablation(&cohort, &base, &a.variants, &seeds)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_text(&a.out.join("ablation_runs.csv"), &ablation_runs_csv(&runs))?;
    print!("{}", ablation_table(&rows));
    Ok(rows)
}

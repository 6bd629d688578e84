//! Command-line driver: corpus generation, two-stage training, evaluation,
//! efficiency benchmarking and sweeps.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error, 3 numeric
//! failure (including diverged training). Errors are also printed to stderr
//! as one line of JSON with a stable `error` code.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;

use clipspot::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use clipspot::corpus::{generate_splits, write_feature_file, FeatureFile, FeatureRole, SyntheticSample};
use clipspot::harness::{
    ablation_sweep, default_weight_grid, efficiency_report, evaluate, run_student, run_teacher, steps_sweep,
    weight_sweep, Ablation, MetricsReport, SweepReport, DEFAULT_MS, DEFAULT_NS,
};
use clipspot::trainer::{prepare_samples, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "clipspot", version, about = "Efficient video moment retrieval on a synthetic planted-moment corpus")]
struct Cli {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the corpus seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and write it to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full-computation teacher.
    TrainTeacher {
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a spotter student distilled from a teacher checkpoint.
    TrainStudent {
        /// Teacher checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a split of its corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the no-selection baseline against the spotter on identical inputs.
    Bench {
        /// Student checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss ablations, recursion depths and loss-weight grids.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Loss terms to remove one at a time: any of qav, sel, ftd.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Recursion depths to compare.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    /// Run the (alpha, beta, gamma) weight grid.
    #[arg(long)]
    weights: bool,
    /// Training seeds for the ablation runs.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

/// Training stopped on a non-finite value; the last good checkpoint was kept.
#[derive(Debug)]
struct Diverged(String);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training diverged, last good checkpoint kept: {}", self.0)
    }
}

impl std::error::Error for Diverged {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, status) = classify(&e);
            eprintln!("{}", json!({ "error": code, "message": message(&e) }));
            ExitCode::from(status)
        }
    }
}

/// The error chain joined with `: `, skipping causes a parent already quotes.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if cause.downcast_ref::<Diverged>().is_some() {
            return ("training_diverged", 3);
        }
        if let Some(err) = cause.downcast_ref::<clipspot::Error>() {
            return (err.code(), if err.is_numeric() { 3 } else { 2 });
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 2);
        }
    }
    ("invalid_input", 2)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.corpus_seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(format: Format, value: &T, table: impl FnOnce() -> String) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
        Format::Table => print!("{}", table()),
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out } => synth(cli, out),
        Command::TrainTeacher { out } => train_teacher(cli, out),
        Command::TrainStudent { checkpoint, out } => train_student(cli, checkpoint, out),
        Command::Eval { checkpoint, split, out } => eval(cli, checkpoint, *split, out.as_deref()),
        Command::Bench { checkpoint, out } => bench(cli, checkpoint, out.as_deref()),
        Command::Sweep(args) => sweep(cli, args),
    }
}

fn synth(cli: &Cli, out: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let splits = generate_splits(cfg.corpus_seed, &cfg.corpus, cfg.splits)?;
    let features = out.join("features");
    fs::create_dir_all(&features).with_context(|| format!("creating {}", features.display()))?;

    let mut records = Vec::new();
    for (name, samples) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        for s in samples.iter() {
            write_sample_features(&features, s)?;
            let a = &s.annotation;
            records.push(json!({
                "split": name,
                "video_id": a.video_id,
                "duration": a.duration,
                "span": [a.span.0, a.span.1],
                "clip_span": [s.clip_span.0, s.clip_span.1],
                "clip_count": s.clip_count(),
                "query": a.query_text,
                "tokens": a.query_tokens,
                "topic": s.latent_topic,
                "distractor_topic": s.distractor_topic,
            }));
        }
    }
    let vectors = splits.world.word_vectors(cfg.model.embed_dim);
    write_feature_file(out.join("word_vectors.f32"), &FeatureFile::from_mat("vocabulary", FeatureRole::Embedding, &vectors))?;
    let manifest = json!({ "config": cfg, "samples": records });
    write_json(&out.join("corpus.json"), &manifest)?;

    let summary = json!({
        "out": out,
        "train": splits.train.len(),
        "val": splits.val.len(),
        "test": splits.test.len(),
        "corpus_seed": cfg.corpus_seed,
    });
    emit(cli.format, &summary, || {
        format!(
            "wrote {} train, {} val and {} test videos to {}\n",
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            out.display()
        )
    })
}

fn write_sample_features(dir: &Path, s: &SyntheticSample) -> Result<()> {
    let id = &s.annotation.video_id;
    let streams = [
        (FeatureRole::Background, &s.background, "background"),
        (FeatureRole::Appearance, &s.appearance, "appearance"),
        (FeatureRole::Motion, &s.motion, "motion"),
        (FeatureRole::Clip, &s.raw_clip_features, "clip"),
    ];
    for (role, m, tag) in streams {
        write_feature_file(dir.join(format!("{id}.{tag}.f32")), &FeatureFile::from_mat(id.clone(), role, m))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    stage: Stage,
    checkpoint: &'a Path,
    best_epoch: usize,
    best_val_r1: f64,
    epochs_run: usize,
    test: &'a MetricsReport,
}

fn train_summary_table(s: &TrainSummary) -> String {
    format!(
        "{:?} checkpoint {} (epoch {}, val R@1 IoU=0.5 {:.4}, {} epochs run)\ntest split:\n{}",
        s.stage,
        s.checkpoint.display(),
        s.best_epoch,
        s.best_val_r1,
        s.epochs_run,
        s.test.to_table()
    )
}

fn train_teacher(cli: &Cli, out: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let run = run_teacher(&cfg)?;
    save_checkpoint(out, &run.checkpoint)?;
    info!("teacher checkpoint written to {}", out.display());
    let summary = TrainSummary {
        stage: Stage::Teacher,
        checkpoint: out,
        best_epoch: run.checkpoint.header.epoch,
        best_val_r1: run.checkpoint.header.best_metric,
        epochs_run: run.history.len(),
        test: &run.test,
    };
    emit(cli.format, &summary, || train_summary_table(&summary))?;
    match run.diverged {
        Some(msg) => Err(Diverged(msg).into()),
        None => Ok(()),
    }
}

fn train_student(cli: &Cli, teacher_path: &Path, out: &Path) -> Result<()> {
    let teacher = load_checkpoint(teacher_path)?;
    if teacher.header.stage != Stage::Teacher {
        bail!(clipspot::Error::Config(format!("{} is not a teacher checkpoint", teacher_path.display())));
    }
    let mut cfg = match &cli.config {
        Some(_) => load_config(cli)?,
        None => teacher.header.config.clone(),
    };
    if cli.config.is_none() {
        if let Some(seed) = cli.seed {
            cfg.train.seed = seed;
        }
    }
    // The corpus always comes from the teacher's run.
    cfg.corpus_seed = teacher.header.corpus_seed;
    let teacher_run = teacher_run_from(&cfg, teacher)?;
    let (result, _, checkpoint) = run_student(&cfg, &teacher_run, "student")?;
    save_checkpoint(out, &checkpoint)?;
    let summary = TrainSummary {
        stage: Stage::Student,
        checkpoint: out,
        best_epoch: result.best_epoch,
        best_val_r1: result.val_r1,
        epochs_run: result.history.len(),
        test: &result.test,
    };
    emit(cli.format, &summary, || train_summary_table(&summary))?;
    match result.diverged {
        Some(msg) => Err(Diverged(msg).into()),
        None => Ok(()),
    }
}

/// Rebuilds the data a teacher was trained on, for a student run.
fn teacher_run_from(cfg: &ExperimentConfig, checkpoint: Checkpoint) -> Result<clipspot::harness::TeacherRun> {
    let model = checkpoint.to_model()?;
    let splits = generate_splits(checkpoint.header.corpus_seed, &cfg.corpus, cfg.splits)?;
    let data = clipspot::trainer::prepare_splits(&model, &splits)?;
    let (test, _) = evaluate(&model, &data.test, None, &DEFAULT_NS, &DEFAULT_MS)?;
    Ok(clipspot::harness::TeacherRun { splits, data, checkpoint, model, history: Vec::new(), test, diverged: None })
}

/// The checkpoint's model and the requested split of the corpus it was trained on.
fn checkpoint_data(path: &Path, split: Split) -> Result<(Checkpoint, clipspot::model::Model, Vec<clipspot::model::PreparedSample>)> {
    let checkpoint = load_checkpoint(path)?;
    let model = checkpoint.to_model()?;
    let cfg = &checkpoint.header.config;
    let splits = generate_splits(checkpoint.header.corpus_seed, &cfg.corpus, cfg.splits)?;
    let samples = match split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
    };
    let prepared = prepare_samples(&model, samples)?;
    Ok((checkpoint, model, prepared))
}

fn eval(cli: &Cli, path: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let (checkpoint, model, samples) = checkpoint_data(path, split)?;
    let gate = match checkpoint.header.stage {
        Stage::Teacher => None,
        Stage::Student => Some(checkpoint.header.config.train.gate.clone()),
    };
    let (report, _) = evaluate(&model, &samples, gate.as_ref(), &DEFAULT_NS, &DEFAULT_MS)?;
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    emit(cli.format, &report, || report.to_table())
}

fn bench(cli: &Cli, path: &Path, out: Option<&Path>) -> Result<()> {
    let (checkpoint, model, samples) = checkpoint_data(path, Split::Test)?;
    if checkpoint.header.stage != Stage::Student {
        bail!(clipspot::Error::Config("bench needs a student checkpoint".into()));
    }
    let report = efficiency_report(&model, &samples, &checkpoint.header.config.train.gate)?;
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    emit(cli.format, &report, || report.to_table())
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let ablations = args
        .ablate
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Ablation>())
        .collect::<Result<Vec<_>, _>>()?;
    let everything = ablations.is_empty() && args.steps.is_empty() && !args.weights;
    let seeds = if args.seeds.is_empty() { vec![cfg.train.seed] } else { args.seeds.clone() };

    let mut reports: Vec<(&str, SweepReport)> = Vec::new();
    if everything || !ablations.is_empty() {
        let which = if ablations.is_empty() { vec![Ablation::Qav, Ablation::Sel, Ablation::Ftd] } else { ablations };
        reports.push(("ablation", ablation_sweep(&cfg, &which, &seeds)?));
    }
    if everything || !args.steps.is_empty() {
        let steps = if args.steps.is_empty() { vec![3, 5, 7] } else { args.steps.clone() };
        if steps.contains(&0) {
            return Err(anyhow!(clipspot::Error::Config("recursion depth must be at least 1".into())));
        }
        reports.push(("steps", steps_sweep(&cfg, &steps)?));
    }
    if everything || args.weights {
        reports.push(("weights", weight_sweep(&cfg, &default_weight_grid())?));
    }

    let value: serde_json::Map<String, serde_json::Value> =
        reports.iter().map(|(k, r)| Ok((k.to_string(), serde_json::to_value(r)?))).collect::<Result<_>>()?;
    if let Some(out) = &args.out {
        write_json(out, &value)?;
    }
    emit(cli.format, &value, || {
        reports.iter().map(|(name, r)| format!("== {name} ==\n{}", r.to_table())).collect::<Vec<_>>().join("\n")
    })
}

//! The `tdann` command line.
//!
//! Every command resolves a [`RunConfig`] (defaults, then `--config`, then
//! each `--set key=value`, then command flags), creates
//! `<out>/<command>-<timestamp>-seed<seed>` and writes `config.resolved`
//! there next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{domain_gap_report, write_projection_csv, FeatureSet, GapReport};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::diagnostics::{self, SuiteOptions};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::trainer::{self, Mode, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "tdann", version, about = "Domain-adversarial transformer encoders for multi-temporal sequences")]
pub struct Cli {
    /// Configuration file of `section.key=value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic source/target pair.
    Generate(GenerateArgs),
    /// Train a baseline or adversarial model.
    Train(TrainArgs),
    /// Metrics and pooled features of a checkpoint on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Kernel MMD between two feature files.
    Gap(GapArgs),
    /// Principal-component projection of feature files.
    Project(ProjectArgs),
    /// Finite-difference check of every backward rule.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write CSV copies.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = ["baseline", "dann"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// One adversarial run per value of `train.lambda_sweep`.
    #[arg(long)]
    pub sweep: bool,
    /// Stop after this many epochs; the checkpoint can be resumed.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Continue the run in this directory.
    #[arg(long, value_name = "RUN_DIR", conflicts_with = "sweep")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Pooled tokens written to features.csv (default `eval.features`).
    #[arg(long)]
    pub features: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GapArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// `median` or a positive number (default `kernel.bandwidth`).
    #[arg(long)]
    pub bandwidth: Option<String>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// Feature CSV files, projected on shared axes.
    #[arg(long = "features", required = true, num_args = 1..)]
    pub features: Vec<PathBuf>,
    /// 2 or 3 (default `project.dims`).
    #[arg(long)]
    pub dims: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, hide = true, value_name = "OP:FACTOR")]
    pub inject_fault: Option<String>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; errors are printed to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs a parsed command, writing the human-readable report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let mut overrides = cli.set.clone();
    let mut config_path = cli.config.clone();
    match &cli.command {
        Command::Generate(a) => {
            push(&mut overrides, "generator.seed", a.seed);
        }
        Command::Train(a) => {
            if let Some(dir) = &a.resume {
                if config_path.is_none() {
                    config_path = Some(dir.join("config.resolved"));
                }
            }
            push(&mut overrides, "train.mode", a.mode.as_ref());
            push(&mut overrides, "train.source", a.source.as_ref().map(|p| p.display()));
            push(&mut overrides, "train.target", a.target.as_ref().map(|p| p.display()));
            push(&mut overrides, "train.seed", a.seed);
            push(&mut overrides, "train.epochs", a.epochs);
            push(&mut overrides, "train.lambda_max", a.lambda_max);
        }
        Command::Evaluate(a) => push(&mut overrides, "eval.features", a.features),
        Command::Gap(a) => push(&mut overrides, "kernel.bandwidth", a.bandwidth.as_ref()),
        Command::Project(a) => push(&mut overrides, "project.dims", a.dims),
        Command::Gradcheck(a) => {
            push(&mut overrides, "gradcheck.seeds", a.seeds);
            push(&mut overrides, "gradcheck.tolerance", a.tolerance);
        }
    }
    let config = RunConfig::load(config_path.as_deref(), &overrides)?;
    match &cli.command {
        Command::Generate(a) => generate(&config, a, &cli.out, out),
        Command::Train(a) => train(config, a, &cli.out, out),
        Command::Evaluate(a) => evaluate(&config, a, &cli.out, out),
        Command::Gap(a) => gap(&config, a, &cli.out, out),
        Command::Project(a) => project(&config, a, &cli.out, out),
        Command::Gradcheck(a) => gradcheck(&config, a, &cli.out, out),
    }
}

fn push(overrides: &mut Vec<String>, key: &str, value: Option<impl std::fmt::Display>) {
    if let Some(v) = value {
        overrides.push(format!("{key}={v}"));
    }
}

fn wr(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Creates `<parent>/<command>-<timestamp>-seed<seed><suffix>`, adding a
/// counter if that directory already exists.
pub fn run_dir(parent: &Path, command: &str, seed: u64, suffix: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{command}-{stamp}-seed{seed}{suffix}");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut n = 0;
    loop {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
}

fn generate(config: &RunConfig, args: &GenerateArgs, parent: &Path, out: &mut dyn Write) -> Result<i32> {
    let (source, target) = data::generate(&config.generator)?;
    let dir = run_dir(parent, "generate", config.generator.seed, "")?;
    config.write_snapshot(&dir)?;
    let mut text = format!("run_dir={}\n", dir.display());
    for (name, d) in [("source", &source), ("target", &target)] {
        let path = dir.join(format!("{name}.tdds"));
        data::save(d, &path)?;
        if args.csv {
            data::save_csv(d, dir.join(format!("{name}.csv")))?;
        }
        let counts: Vec<String> = d.class_counts().iter().map(|c| c.to_string()).collect();
        text += &format!(
            "{name}: domain={} samples={} steps={} bands={} class_counts={} file={}\n",
            d.domain,
            d.len(),
            d.steps,
            d.bands,
            counts.join(","),
            path.display()
        );
    }
    wr(out, &text)?;
    Ok(0)
}

fn load_dataset(path: &Path, train: &TrainConfig) -> Result<Dataset> {
    data::load_with_shape(path, train.encoder.steps, train.encoder.bands, train.head.classes)
}

/// Takes steps, bands and classes from the source data unless they were set.
fn align_to_data(config: &mut RunConfig, source: &Dataset) {
    if !config.is_explicit("encoder.steps") {
        config.train.encoder.steps = source.steps;
    }
    if !config.is_explicit("encoder.bands") {
        config.train.encoder.bands = source.bands;
    }
    if !config.is_explicit("head.classes") {
        config.train.head.classes = source.classes;
    }
}

fn train(mut config: RunConfig, args: &TrainArgs, parent: &Path, out: &mut dyn Write) -> Result<i32> {
    let source_path = config
        .train
        .source
        .clone()
        .ok_or_else(|| Error::Config("train needs a source dataset (--source or train.source)".into()))?;
    // CSV sources need a shape before loading; binary ones carry their own.
    let source = load_dataset(&source_path, &config.train)?;
    align_to_data(&mut config, &source);
    let target = match (&config.train.target, config.train.mode) {
        (Some(p), _) => Some(load_dataset(p, &config.train)?),
        (None, Mode::Dann) => {
            return Err(Error::Config("dann mode needs a target dataset (--target or train.target)".into()))
        }
        (None, Mode::Baseline) => None,
    };

    if let Some(dir) = &args.resume {
        let ckpt = ["model.tdpt", "last_good.tdpt"]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Config(format!("{} holds no checkpoint to resume", dir.display())))?;
        let mut tc = config.train.clone();
        tc.resume = Some(ckpt);
        tc.stop_after = args.stop_after;
        let outcome = trainer::train(&tc, &source, target.as_ref(), Some(dir))?;
        wr(out, &format!("run_dir={}\n", dir.display()))?;
        summarize(&outcome, target.as_ref(), out)?;
        return Ok(0);
    }

    let lambdas: Vec<Option<f64>> = if args.sweep {
        if config.train.mode != Mode::Dann {
            return Err(Error::Config("--sweep needs train.mode=dann".into()));
        }
        if config.sweep.is_empty() {
            return Err(Error::Config("train.lambda_sweep is empty".into()));
        }
        config.sweep.iter().map(|&l| Some(l)).collect()
    } else {
        vec![None]
    };
    for lambda in lambdas {
        let mut run = config.clone();
        let suffix = match lambda {
            Some(l) => {
                run.train.schedules.lambda_max = l;
                format!("-lmax{l}")
            }
            None => String::new(),
        };
        let dir = run_dir(parent, &format!("train-{}", run.train.mode.name()), run.train.seed, &suffix)?;
        run.write_snapshot(&dir)?;
        let mut tc = run.train.clone();
        tc.out_dir = Some(dir.clone());
        tc.stop_after = args.stop_after;
        let outcome = trainer::train(&tc, &source, target.as_ref(), Some(&dir))?;
        wr(out, &format!("run_dir={}\nlambda_max={}\n", dir.display(), run.train.schedules.lambda_max))?;
        summarize(&outcome, target.as_ref(), out)?;
    }
    Ok(0)
}

fn summarize(outcome: &trainer::TrainOutcome, target: Option<&Dataset>, out: &mut dyn Write) -> Result<()> {
    let mut text = String::new();
    match outcome.log.records.last() {
        Some(r) => {
            text += &format!(
                "epochs={}\nloss_y={}\nloss_d={}\nsource_accuracy={}\n",
                r.epoch + 1,
                r.loss_y,
                r.loss_d,
                r.acc_train
            );
        }
        None => text += "epochs=0\n",
    }
    if let Some(t) = target.filter(|t| t.is_labeled()) {
        text += &format!("target_accuracy={}\n", trainer::accuracy_on(&outcome.model, t)?);
    }
    wr(out, &text)
}

fn evaluate(config: &RunConfig, args: &EvaluateArgs, parent: &Path, out: &mut dyn Write) -> Result<i32> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let data = data::load_with_shape(&args.data, model.encoder.steps, model.encoder.bands, model.head.classes)?;
    let eval = trainer::evaluate(&model, &data, config.eval.features, config.eval.seed)?;
    let dir = run_dir(parent, "evaluate", config.eval.seed, "")?;
    config.write_snapshot(&dir)?;
    let m = &eval.metrics;
    let metrics_path = dir.join("metrics.csv");
    write_file(&metrics_path, &format!("{}\n{}\n", MetricsRecord::CSV_HEADER, m.csv_row()))?;
    write_file(&dir.join("confusion.csv"), &confusion_csv(&eval.confusion))?;
    let features_path = dir.join("features.csv");
    eval.features.save_csv(&features_path)?;
    wr(
        out,
        &format!(
            "run_dir={}\n{}features={} file={}\n",
            dir.display(),
            m.report(),
            eval.features.len(),
            features_path.display()
        ),
    )?;
    Ok(0)
}

fn confusion_csv(cm: &crate::metrics::ConfusionMatrix) -> String {
    let k = cm.classes();
    let mut s = String::from("truth");
    for p in 0..k {
        s += &format!(",pred{p}");
    }
    s.push('\n');
    for t in 0..k {
        s += &t.to_string();
        for p in 0..k {
            s += &format!(",{}", cm.get(t, p));
        }
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_dims(dims: usize) -> Result<()> {
    if dims == 2 || dims == 3 {
        Ok(())
    } else {
        Err(Error::Config(format!("project.dims must be 2 or 3, got {dims}")))
    }
}

fn gap(config: &RunConfig, args: &GapArgs, parent: &Path, out: &mut dyn Write) -> Result<i32> {
    check_dims(config.project_dims)?;
    let source = FeatureSet::load_csv(&args.source)?;
    let target = FeatureSet::load_csv(&args.target)?;
    let report = domain_gap_report(&source, &target, &config.kernel, config.project_dims)?;
    let dir = run_dir(parent, "gap", config.kernel.seed, "")?;
    config.write_snapshot(&dir)?;
    write_file(&dir.join("gap.csv"), &format!("{}\n{}\n", GapReport::CSV_HEADER, report.csv_row()))?;
    write_projection_csv(dir.join("projection.csv"), &[&source, &target], config.project_dims)?;
    wr(out, &format!("run_dir={}\n{}", dir.display(), report.report()))?;
    Ok(0)
}

fn project(config: &RunConfig, args: &ProjectArgs, parent: &Path, out: &mut dyn Write) -> Result<i32> {
    check_dims(config.project_dims)?;
    let sets = args
        .features
        .iter()
        .map(FeatureSet::load_csv)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FeatureSet> = sets.iter().collect();
    let dir = run_dir(parent, "project", config.kernel.seed, "")?;
    config.write_snapshot(&dir)?;
    let path = dir.join("projection.csv");
    let proj = write_projection_csv(&path, &refs, config.project_dims)?;
    let ev: Vec<String> = proj.explained.iter().map(|v| v.to_string()).collect();
    wr(
        out,
        &format!(
            "run_dir={}\nrows={}\ndims={}\nexplained_variance={}\nfile={}\n",
            dir.display(),
            proj.coords.rows(),
            config.project_dims,
            ev.join(" "),
            path.display()
        ),
    )?;
    Ok(0)
}

fn gradcheck(config: &RunConfig, args: &GradcheckArgs, parent: &Path, out: &mut dyn Write) -> Result<i32> {
    let opts = SuiteOptions {
        seeds: config.gradcheck_seeds,
        tolerance: config.gradcheck_tolerance,
        fault: args.inject_fault.as_deref().map(diagnostics::parse_fault).transpose()?,
        ..SuiteOptions::default()
    };
    let report = diagnostics::run_suite(&opts)?;
    let dir = run_dir(parent, "gradcheck", 0, "")?;
    config.write_snapshot(&dir)?;
    let text = report.report();
    write_file(&dir.join("gradcheck.txt"), &text)?;
    wr(out, &format!("run_dir={}\n{text}", dir.display()))?;
    Ok(if report.passed() { 0 } else { 1 })
}

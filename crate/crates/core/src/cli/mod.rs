//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or usage
//! error, 3 runtime error.

pub mod config;
pub mod csv;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{EnvKind, GridParams, RunConfig};
pub use csv::{parse_metrics, sig6, write_metrics, write_theory_report, METRICS_HEADER, THEORY_HEADER};

use crate::network::write_checkpoint;
use crate::parallel;
use crate::theory::{self, Tolerances};
use crate::trainer::{self, MetricsRecord, RunOutcome, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const JOBS_ENV: &str = "COOP_EDL_JOBS";
pub const DEFAULT_BUFFER_VALUES: [usize; 8] = [500, 1000, 1500, 2000, 3000, 3500, 4000, 5000];
pub const DEFAULT_EXPLORATION_VALUES: [f64; 3] = [0.0, 0.01, 0.5];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "coop-edl", version, about = "Cooperative dual-network Q-learning with error-driven updates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write metrics plus checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV path; checkpoints are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay-buffer capacity sweep.
    SweepBuffer {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUFFER_VALUES)]
        values: Vec<usize>,
    },
    /// Exploration (`s_scale`) sweep; 0 runs the gradient variant.
    SweepExploration {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EXPLORATION_VALUES)]
        values: Vec<f64>,
    },
    /// Numerical checks of the cost decomposition, bound and descent terms.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Overrides every suite tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "theory_report.csv")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Seeds per cell; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cells run concurrently; defaults to $COOP_EDL_JOBS, then the CPU count.
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref()).map(|_| EXIT_OK),
        Command::SweepBuffer { sweep, values } => {
            if values.contains(&0) {
                return Err(CliError::Config("--values: buffer sizes must be positive".into()));
            }
            let cells: Vec<SweepValue> = values.into_iter().map(SweepValue::Buffer).collect();
            cmd_sweep(&sweep, cells, "buffer").map(|_| EXIT_OK)
        }
        Command::SweepExploration { sweep, values } => {
            if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(CliError::Config("--values: exploration rates must be >= 0".into()));
            }
            let cells: Vec<SweepValue> = values.into_iter().map(SweepValue::Exploration).collect();
            cmd_sweep(&sweep, cells, "exploration").map(|_| EXIT_OK)
        }
        Command::Verify { trials, tol, seed, out } => cmd_verify(trials, tol, seed, &out),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Trains `cfg` on a fresh environment, stopping early once the rolling mean
/// reaches `target_mean100` when one is set.
pub fn train(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let mut env = cfg.build_env().map_err(|e| CliError::Config(e.to_string()))?;
    let target = cfg.target_mean100;
    trainer::run_training_with(&cfg.trainer, env.as_mut(), |r| target.is_none_or(|t| r.mean100 < t))
        .map_err(|e| match e {
            trainer::TrainError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        })
}

fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime(&dir.display().to_string()))?;
    }
    let f = File::create(path).map_err(runtime(&path.display().to_string()))?;
    write_metrics(records, BufWriter::new(f)).map_err(runtime(&path.display().to_string()))
}

/// Checkpoint paths for a metrics file: `<stem>.net1.ckpt`, `<stem>.net2.ckpt`.
pub fn checkpoint_paths(metrics: &Path) -> [PathBuf; 2] {
    let stem = metrics.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    [1, 2].map(|i| metrics.with_file_name(format!("{stem}.net{i}.ckpt")))
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunOutcome, CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("metrics.csv"));
    let outcome = train(&cfg)?;
    write_csv(&out, &outcome.metrics)?;
    for (net, path) in outcome.networks.iter().zip(checkpoint_paths(&out)) {
        let f = File::create(&path).map_err(runtime(&path.display().to_string()))?;
        let mut w = BufWriter::new(f);
        write_checkpoint(net, &mut w).map_err(runtime(&path.display().to_string()))?;
        w.flush().map_err(runtime(&path.display().to_string()))?;
    }
    if let Some(last) = outcome.metrics.last() {
        println!(
            "{} episodes, {} steps, final mean100 {} (std {}), qdiff {}",
            last.episode,
            outcome.total_steps,
            sig6(last.mean100),
            sig6(last.std100),
            sig6(last.qdiff)
        );
    }
    println!("metrics written to {}", out.display());
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Buffer(usize),
    Exploration(f64),
}

impl SweepValue {
    fn apply(self, cfg: &mut RunConfig) {
        match self {
            Self::Buffer(n) => cfg.trainer.buffer_capacity = n,
            Self::Exploration(s) => {
                cfg.trainer.s_scale = s;
                if s == 0.0 {
                    cfg.trainer.variant = match cfg.trainer.variant {
                        Variant::Coop => Variant::GCoop,
                        Variant::Edql => Variant::Dql,
                        v => v,
                    };
                }
            }
        }
    }

    fn as_f64(self) -> f64 {
        match self {
            Self::Buffer(n) => n as f64,
            Self::Exploration(s) => s,
        }
    }

    fn label(self) -> String {
        match self {
            Self::Buffer(n) => n.to_string(),
            Self::Exploration(s) => sig6(s),
        }
    }
}

/// Final cell of a sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub value: f64,
    pub seed: u64,
    pub variant: Variant,
    pub episodes: usize,
    pub final_mean100: f64,
    pub final_qdiff: f64,
}

pub const SUMMARY_HEADER: &str = "value,seed,variant,episodes,final_mean100,final_qdiff";

pub fn jobs_or_default(jobs: Option<usize>) -> usize {
    jobs.or_else(|| std::env::var(JOBS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .max(1)
}

pub fn cmd_sweep(args: &SweepArgs, mut values: Vec<SweepValue>, kind: &str) -> Result<Vec<SummaryRow>, CliError> {
    let base = load_config(&args.config)?;
    values.sort_by(|a, b| a.as_f64().total_cmp(&b.as_f64()));
    let seeds = if args.seeds.is_empty() {
        vec![base.trainer.seed]
    } else {
        args.seeds.clone()
    };
    let dir = args
        .out
        .clone()
        .or_else(|| base.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("sweep_{kind}")));
    fs::create_dir_all(&dir).map_err(runtime(&dir.display().to_string()))?;

    let mut cells = Vec::new();
    for &v in &values {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.trainer.seed = seed;
            v.apply(&mut cfg);
            cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
            cells.push((v, cfg));
        }
    }
    let jobs = jobs_or_default(args.jobs);
    let results = parallel::map_with_jobs(&cells, jobs, |(v, cfg)| -> Result<SummaryRow, CliError> {
        let outcome = train(cfg)?;
        let path = dir.join(format!("{kind}_{}_seed_{}.csv", v.label(), cfg.trainer.seed));
        write_csv(&path, &outcome.metrics)?;
        let last = outcome.metrics.last();
        Ok(SummaryRow {
            value: v.as_f64(),
            seed: cfg.trainer.seed,
            variant: cfg.trainer.variant,
            episodes: outcome.metrics.len(),
            final_mean100: last.map_or(f64::NAN, |r| r.mean100),
            final_qdiff: last.map_or(f64::NAN, |r| r.qdiff),
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let path = dir.join("summary.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(runtime(&path.display().to_string()))?);
    let mut text = format!("{SUMMARY_HEADER}\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sig6(r.value),
            r.seed,
            r.variant,
            r.episodes,
            sig6(r.final_mean100),
            sig6(r.final_qdiff)
        ));
    }
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(runtime(&path.display().to_string()))?;
    print!("{text}");
    Ok(rows)
}

pub fn cmd_verify(trials: usize, tol: Option<f64>, seed: u64, out: &Path) -> Result<i32, CliError> {
    if trials == 0 {
        return Err(CliError::Config("--trials must be >= 1".into()));
    }
    if let Some(t) = tol {
        if !(t >= 0.0) {
            return Err(CliError::Config("--tol must be >= 0".into()));
        }
    }
    let tolerances = tol.map_or_else(Tolerances::default, Tolerances::uniform);
    let report = theory::verify_all(trials, seed, tolerances).map_err(runtime("verify"))?;
    let f = File::create(out).map_err(runtime(&out.display().to_string()))?;
    write_theory_report(&report, BufWriter::new(f)).map_err(runtime(&out.display().to_string()))?;

    println!("{:<10} {:>7} {:>7} {:>7} {:>9}  result", "suite", "trials", "skipped", "passed", "required");
    for s in report.summaries() {
        println!(
            "{:<10} {:>7} {:>7} {:>7} {:>8.0}%  {}",
            s.suite,
            s.trials,
            s.skipped,
            s.passed,
            s.required_fraction * 100.0,
            if s.pass() { "PASS" } else { "FAIL" }
        );
    }
    println!("report written to {}", out.display());
    Ok(if report.all_pass() { EXIT_OK } else { EXIT_FAILED })
}

//! The `tsedit` command line.
//!
//! ```text
//! tsedit train                          # fit a model, write <out>/checkpoint.json
//! tsedit sample --n 4                   # unconditional series
//! tsedit edit --constraints c.json      # guided series + edit.json + trace.json
//! tsedit sweep --kind confidence        # MAD grid over anchor confidences
//! tsedit metrics --constraints c.json a.csv b.csv
//! ```
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for anything that
//! fails while running.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsedit::checkpoint::Checkpoint;
use tsedit::constraints::ConstraintSet;
use tsedit::data::{denormalize, gen_sines, load_csv};
use tsedit::denoiser::Denoiser;
use tsedit::diffusion::{train, NoiseSchedule};
use tsedit::edit::{run_edit, series_seed, summarize, EditRequest};
use tsedit::guidance::sample_unconditional;
use tsedit::metrics::{run_sweep, SweepSpec};
use tsedit::Series;

pub mod config;
pub mod series_csv;

pub use config::RunConfig;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] tsedit::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tsedit", version, about = "Train a time-series diffusion model and edit its samples")]
pub struct Cli {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps and multi-series edits.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the denoiser and write `<out>/checkpoint.json`.
    Train,
    /// Draw unconditional series into `<out>/samples/`.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Write series in data units instead of the normalized [0, 1] range.
        #[arg(long)]
        denormalize: bool,
    },
    /// Draw guided series into `<out>/edit/`.
    Edit {
        #[command(flatten)]
        model: ModelArgs,
        /// Constraint set as JSON.
        #[arg(long)]
        constraints: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        denormalize: bool,
    },
    /// Run a seed sweep over a grid of constraints into `<out>/sweep/`.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Built-in grid to run.
        #[arg(long, value_enum, default_value_t = SweepKind::Confidence, conflicts_with = "spec")]
        kind: SweepKind,
        /// Custom grid as JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Score series files against a constraint set and print JSON.
    Metrics {
        #[arg(long)]
        constraints: PathBuf,
        #[arg(required = true)]
        series: Vec<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct ModelArgs {
    /// Defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Confidence,
    Sum,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut sets = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(jobs) = cli.jobs {
        sets.push(format!("jobs={jobs}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &sets)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Sample { model, n, denormalize } => cmd_sample(&cfg, model, *n, *denormalize).map(|_| ()),
        Command::Edit {
            model,
            constraints,
            n,
            denormalize,
        } => cmd_edit(&cfg, model, constraints, *n, *denormalize).map(|_| ()),
        Command::Sweep { model, kind, spec } => cmd_sweep(&cfg, model, *kind, spec.as_deref()).map(|_| ()),
        Command::Metrics { constraints, series } => cmd_metrics(constraints, series),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dataset = match cfg.data.kind {
        config::DataKind::Sines => gen_sines(cfg.data.n, cfg.data.len, cfg.data.channels, cfg.seed),
        config::DataKind::Csv => {
            let path = cfg.data.path.as_deref().expect("checked when loading the config");
            load_csv(path, cfg.data.len, cfg.data.channels)?
        }
    };
    let sched = NoiseSchedule::from_params(cfg.schedule)?;
    let init = Denoiser::new(cfg.denoiser(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let (model, report) = train(init, &dataset.series, &sched, &cfg.train_config())?;
    let label = match cfg.data.kind {
        config::DataKind::Sines => "sines".to_string(),
        config::DataKind::Csv => cfg
            .data
            .path
            .as_deref()
            .and_then(Path::file_stem)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
    };
    let ck = Checkpoint {
        label,
        schedule: cfg.schedule,
        model,
        norm: dataset.norm,
        train_report: Some(report.clone()),
    };
    create_dir(&cfg.out)?;
    let path = cfg.out.join("checkpoint.json");
    write_file(&path, &ck.to_json()?)?;
    println!(
        "final loss {} (held out, initial {}); wrote {}",
        report.final_loss,
        report.initial_loss,
        path.display()
    );
    Ok(path)
}

fn load_model(cfg: &RunConfig, args: &ModelArgs) -> Result<(Checkpoint, NoiseSchedule), CliError> {
    let path = args.checkpoint.clone().unwrap_or_else(|| cfg.out.join("checkpoint.json"));
    let ck = Checkpoint::load(&path)?;
    let sched = ck.schedule()?;
    Ok((ck, sched))
}

fn write_series(dir: &Path, series: &[Series], ck: &Checkpoint, denorm: bool) -> Result<Vec<PathBuf>, CliError> {
    create_dir(dir)?;
    series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("series_{i:03}.csv"));
            let s = if denorm { denormalize(s, &ck.norm)? } else { s.clone() };
            series_csv::write(&path, &s)?;
            Ok(path)
        })
        .collect()
}

/// Writes `n` unconditional series seeded `seed, seed + 1, …`.
pub fn cmd_sample(cfg: &RunConfig, model: &ModelArgs, n: usize, denorm: bool) -> Result<Vec<PathBuf>, CliError> {
    let (ck, sched) = load_model(cfg, model)?;
    let series = (0..n)
        .map(|i| sample_unconditional(&ck.model, &sched, cfg.guidance.clamp, series_seed(cfg.seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let paths = write_series(&cfg.out.join("samples"), &series, &ck, denorm)?;
    println!("wrote {} series to {}", paths.len(), cfg.out.join("samples").display());
    Ok(paths)
}

/// Runs one edit request. `edit.json` holds the response exactly as the
/// HTTP service returns it; the per-step diagnostics go to `trace.json`.
pub fn cmd_edit(
    cfg: &RunConfig,
    model: &ModelArgs,
    constraints: &Path,
    n: usize,
    denorm: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let (ck, sched) = load_model(cfg, model)?;
    let set = ConstraintSet::from_json(&read_file(constraints)?)?;
    let request = EditRequest {
        constraints: set,
        seed: cfg.seed,
        n,
    };
    let mut guidance = cfg.guidance.clone();
    let keep_trace = guidance.trace;
    guidance.trace = true;
    let mut response = pool(cfg.jobs)?.install(|| run_edit(&ck.model, &sched, &request, &guidance))?;
    let trace = response.trace.take().unwrap_or_default();
    if keep_trace {
        response.trace = Some(trace.clone());
    }
    let dir = cfg.out.join("edit");
    let paths = write_series(&dir, &response.series, &ck, denorm)?;
    write_file(&dir.join("edit.json"), &response.to_json()?)?;
    write_file(
        &dir.join("trace.json"),
        &serde_json::to_string(&trace).map_err(tsedit::Error::from)?,
    )?;
    match response.mad {
        Some(m) => println!("wrote {} series to {} (anchor MAD {m})", paths.len(), dir.display()),
        None => println!("wrote {} series to {}", paths.len(), dir.display()),
    }
    Ok(paths)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Runs a sweep and writes `<kind>.csv` (grid of means) and `<kind>.json`
/// (full report including per-seed values and the unconditional baseline).
pub fn cmd_sweep(
    cfg: &RunConfig,
    model: &ModelArgs,
    kind: SweepKind,
    spec_path: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let (ck, sched) = load_model(cfg, model)?;
    let (name, spec) = match spec_path {
        Some(p) => {
            let spec: SweepSpec = serde_json::from_str(&read_file(p)?)
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sweep".into());
            (name, spec)
        }
        None => match kind {
            SweepKind::Confidence => ("confidence".to_string(), SweepSpec::default_confidence()),
            SweepKind::Sum => ("sum".to_string(), SweepSpec::default_sum()),
        },
    };
    let seeds: Vec<u64> = (0..cfg.sweep.seeds).map(|i| series_seed(cfg.seed, i)).collect();
    let report = run_sweep(&ck.model, &sched, &spec, &cfg.guidance, &seeds, cfg.jobs)?;
    let dir = cfg.out.join("sweep");
    create_dir(&dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    write_file(&csv_path, &report.to_csv())?;
    write_file(
        &dir.join(format!("{name}.json")),
        &serde_json::to_string_pretty(&report).map_err(tsedit::Error::from)?,
    )?;
    print!("{}", report.to_csv());
    Ok(csv_path)
}

pub fn cmd_metrics(constraints: &Path, files: &[PathBuf]) -> Result<(), CliError> {
    let set = ConstraintSet::from_json(&read_file(constraints)?)?;
    let series = files.iter().map(|p| series_csv::read(p)).collect::<Result<Vec<_>, _>>()?;
    let (len, channels) = series[0].shape();
    if let Some((p, _)) = files.iter().zip(&series).find(|(_, s)| s.shape() != (len, channels)) {
        return Err(CliError::Input(format!("{} has a different shape than {}", p.display(), files[0].display())));
    }
    set.validate(len, channels)?;
    let summary = summarize(&series, &set)?;
    let text = serde_json::to_string_pretty(&summary).map_err(tsedit::Error::from)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}

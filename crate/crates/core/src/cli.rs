//! The `noisy-cp` command line: `calibrate`, `predict`, `experiment`,
//! `sweep` and `synth`.
//!
//! Every subcommand that takes a run configuration accepts `--config
//! FILE`; explicit flags override the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::calibrate::{calibrate, prediction_set, MethodKind};
use crate::error::{Error, Result};
use crate::eval::{noise_sweep, run_repeated_splits};
use crate::io::{
    read_dataset, summary_csv, sweep_csv, to_json_bytes, write_atomic, write_dataset,
    CalibrationFile, ExperimentFile, RunConfig, SweepBlock,
};
use crate::noise::NoiseModel;
use crate::score::ScoreKind;
use crate::seed::{derive_seed, rng_from_seed, Stream};
use crate::synth::{generate, SynthConfig};

/// Environment variable capping harness parallelism (0 or unset: automatic).
pub const THREADS_ENV: &str = "NOISY_CP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "noisy-cp", version, about = "Conformal prediction sets calibrated on noisy labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate one method and write the threshold as JSON.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        /// Method to calibrate (defaults to the single entry of `methods`).
        #[arg(long)]
        method: Option<MethodKind>,
    },
    /// Build prediction sets for every row of a dataset.
    Predict(PredictArgs),
    /// Run the repeated random-split experiment (or a sweep, if configured).
    Experiment(RunArgs),
    /// Run the experiment once per noise level.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated noise levels, e.g. 0,0.1,0.2.
        #[arg(long, value_delimiter = ',')]
        eps_grid: Option<Vec<f64>>,
    },
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// HPS, APS or RAPS.
    #[arg(long)]
    pub score: Option<ScoreKind>,
    #[arg(long)]
    pub raps_a: Option<f64>,
    #[arg(long)]
    pub raps_b: Option<f64>,
    #[arg(long)]
    pub randomized: bool,
    /// Comma-separated method list.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<MethodKind>>,
    #[arg(long)]
    pub n_splits: Option<usize>,
    #[arg(long)]
    pub calib_fraction: Option<f64>,
    #[arg(long, alias = "seed")]
    pub master_seed: Option<u64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub csv_output: Option<PathBuf>,
    #[arg(long)]
    pub force_nonempty: bool,
    /// Dataset columns hold logits rather than probabilities.
    #[arg(long)]
    pub softmax: bool,
    #[arg(long)]
    pub noisy_test: bool,
    #[arg(long)]
    pub keep_raw: bool,
}

impl RunArgs {
    /// Config file (or defaults) overlaid with explicit flags, then validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
            cfg.synth = None;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set!(
            alpha => alpha,
            epsilon => epsilon,
            score => score.kind,
            raps_a => score.raps_a,
            raps_b => score.raps_b,
            methods => methods,
            n_splits => splits.n_splits,
            calib_fraction => splits.calib_fraction,
            master_seed => master_seed,
        );
        if self.output.is_some() {
            cfg.output = self.output.clone();
        }
        if self.csv_output.is_some() {
            cfg.csv_output = self.csv_output.clone();
        }
        cfg.score.randomized |= self.randomized;
        cfg.force_nonempty |= self.force_nonempty;
        cfg.softmax |= self.softmax;
        cfg.noisy_test |= self.noisy_test;
        cfg.keep_raw |= self.keep_raw;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Calibration JSON written by `calibrate`.
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Seed for the test-time uniform draws of randomized scores.
    #[arg(long, default_value_t = 0)]
    pub test_seed: u64,
    #[arg(long)]
    pub force_nonempty: bool,
    #[arg(long)]
    pub softmax: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub concentration: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise level applied to the `label` column; `clean_label` keeps the truth.
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    #[arg(long)]
    pub rank_breaking: bool,
    #[arg(long, short)]
    pub output: PathBuf,
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(bytes)
                .map_err(|source| Error::Io { path: PathBuf::from("<stdout>"), source })
        }
    }
}

/// Calibrates the configured method on the configured data.
pub fn cmd_calibrate(cfg: &RunConfig, method: Option<MethodKind>) -> Result<CalibrationFile> {
    let method = match (method, cfg.methods.as_slice()) {
        (Some(m), _) => m,
        (None, [m]) => *m,
        (None, _) => return Err(Error::config("calibrate needs exactly one method (use --method)")),
    };
    let mut pool = cfg.load_pool()?;
    if method.is_noise_robust() {
        let noise = NoiseModel::new(cfg.epsilon, pool.k())?;
        pool = pool.with_noise(noise)?;
    }
    let result = calibrate(&pool, method, &cfg.score, cfg.alpha, cfg.master_seed)?;
    let config = RunConfig { methods: vec![method], ..cfg.clone() };
    Ok(CalibrationFile { result, config: Some(config) })
}

/// One output row of `predict`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_index: usize,
    pub members: Vec<usize>,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(&args.calibration)
        .map_err(|source| Error::Io { path: args.calibration.clone(), source })?;
    let calib: CalibrationFile = serde_json::from_str(&text)?;
    let calib = calib.result;
    let data = read_dataset(&args.dataset, args.softmax)?;
    if data.probs.k() != calib.k {
        return Err(Error::input(format!(
            "dataset has k = {}, calibration was built for k = {}",
            data.probs.k(),
            calib.k
        )));
    }
    let mut rng = rng_from_seed(derive_seed(calib.seed, Stream::TestU, args.test_seed));
    data.probs
        .rows()
        .enumerate()
        .map(|(i, p)| {
            let u = calib.score_spec.randomized.then(|| rng.gen::<f64>());
            let mut set = prediction_set(p, &calib, u)?;
            if args.force_nonempty {
                set = set.force_nonempty(p);
            }
            Ok(PredictionRow { sample_index: i, members: set.members().to_vec() })
        })
        .collect()
}

pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("sample_index,set_size,members\n");
    for r in rows {
        let members: Vec<String> = r.members.iter().map(|m| m.to_string()).collect();
        out.push_str(&format!("{},{},{}\n", r.sample_index, r.members.len(), members.join(";")));
    }
    out
}

/// Runs the configured experiment; with a `sweep` block, one report per noise level.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<ExperimentFile> {
    let pool = cfg.load_pool()?;
    let split_cfg = cfg.split_config();
    match &cfg.sweep {
        Some(sw) => {
            let sweep = noise_sweep(&pool, &sw.eps_grid, &split_cfg)?;
            Ok(ExperimentFile { config: cfg.clone(), report: None, sweep: Some(sweep.points) })
        }
        None => {
            let report = run_repeated_splits(&pool, &split_cfg)?;
            Ok(ExperimentFile { config: cfg.clone(), report: Some(report), sweep: None })
        }
    }
}

fn write_experiment(cfg: &RunConfig, file: &ExperimentFile) -> Result<()> {
    emit(cfg.output.as_deref(), &to_json_bytes(file)?)?;
    if let Some(csv_path) = &cfg.csv_output {
        let csv = match (&file.report, &file.sweep) {
            (Some(r), _) => summary_csv(r),
            (None, Some(points)) => sweep_csv(points),
            (None, None) => String::new(),
        };
        write_atomic(csv_path, csv.as_bytes())?;
    }
    Ok(())
}

fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let threads = thread_cap()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Calibrate { run, method } => {
            let cfg = run.resolve()?;
            let file = cmd_calibrate(&cfg, method)?;
            emit(cfg.output.as_deref(), &to_json_bytes(&file)?)
        }
        Command::Predict(args) => {
            let rows = cmd_predict(&args)?;
            emit(args.output.as_deref(), predictions_csv(&rows).as_bytes())
        }
        Command::Experiment(run) => {
            let cfg = run.resolve()?;
            let file = cmd_experiment(&cfg)?;
            write_experiment(&cfg, &file)
        }
        Command::Sweep { run, eps_grid } => {
            let mut cfg = run.resolve()?;
            if let Some(grid) = eps_grid {
                cfg.sweep = Some(SweepBlock { eps_grid: grid });
            }
            if cfg.sweep.is_none() {
                return Err(Error::config("sweep needs --eps-grid or a sweep block in the config"));
            }
            cfg.validate()?;
            let file = cmd_experiment(&cfg)?;
            write_experiment(&cfg, &file)
        }
        Command::Synth(a) => {
            let cfg = SynthConfig {
                n: a.n,
                k: a.k,
                concentration: a.concentration,
                temperature: a.temperature,
                seed: a.seed,
                epsilon: a.epsilon,
                rank_breaking: a.rank_breaking,
            };
            let pool = generate(&cfg)?.pool;
            write_dataset(&a.output, &pool)
        }
    })
}

/// Runs the process: parses arguments, executes, and maps errors to exit codes
/// with a one-line JSON diagnostic on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match &e {
                Error::Input(_) => "input",
                Error::Config(_) => "config",
                Error::Dataset { .. } => "dataset",
                Error::Io { .. } => "io",
                Error::Json(_) => "json",
            };
            let diag = serde_json::json!({ "error": kind, "message": e.to_string() });
            eprintln!("{diag}");
            e.exit_code()
        }
    }
}

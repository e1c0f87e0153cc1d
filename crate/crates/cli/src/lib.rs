//! `cpgg` command surface: argument parsing, logging, exit codes and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cpgg_core::config::RunConfig;

pub mod artifacts;
pub mod commands;

/// Usage errors exit with 1, runtime failures with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(cpgg_core::Error),
}

impl From<cpgg_core::Error> for CliError {
    fn from(e: cpgg_core::Error) -> Self {
        match e {
            cpgg_core::Error::Config(msg) => CliError::Usage(msg),
            e => CliError::Run(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "cpgg", version, about = "Phenotype-guided cardiac cine generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single override, `key=value`; may be repeated and wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{o}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a phantom cine dataset with measured phenotypes.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the phenotype VAE.
    TrainPhenoVae(TrainArgs),
    /// Train the cine VAE.
    TrainCineVae(TrainArgs),
    /// Train the masked autoregressive generator on cached cine latents.
    TrainMar(TrainArgs),
    /// Generate cines from a trained run.
    Sample {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Decode steps K.
        #[arg(long)]
        steps: Option<usize>,
        /// CSV of conditioning phenotypes (physical units), one row per sample.
        #[arg(long)]
        pheno_file: Option<PathBuf>,
        /// Also write an animated GIF and per-frame PGMs for every sample.
        #[arg(long)]
        export: bool,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Distribution and conditioning-fidelity metrics of generated cines.
    EvalGen {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// MAE pretraining on real plus synthetic cines and downstream fine-tuning.
    Downstream {
        #[arg(long, value_delimiter = ',', default_value = "0,1,3")]
        rho_list: Vec<usize>,
        #[arg(long)]
        mix_star: bool,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for report.csv and summary.txt.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode cost and wall-clock per cine for several step counts.
    Bench {
        /// Step counts; `N` stands for token-by-token decoding.
        #[arg(long = "K-list", alias = "k-list", value_delimiter = ',', default_value = "1,4,16,N")]
        k_list: Vec<String>,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long, default_value_t = 2)]
        reps: usize,
        #[arg(long)]
        run: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory holding checkpoints and loss logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in --out up to the configured epochs.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub common: Common,
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("CPGG_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::Usage(format!("CPGG_THREADS must be an integer, got `{v}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = init_threads().and_then(|_| commands::dispatch(cli.command));
    match result {
        Ok(()) => 0,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

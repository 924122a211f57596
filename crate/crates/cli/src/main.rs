use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdgc::Execution;
use hdgc_cli::config::{self, DetectConfig, RunConfig, SimulateConfig};
use hdgc_cli::{detect_cmd, fit_cmd, simulate_cmd, CliError, CliResult};

#[derive(Parser)]
#[command(name = "hdgc", version, about = "Hidden dynamic geostatistical calibration: simulate, fit, detect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Planar,
    Geographic,
}

impl From<MetricArg> for hdgc::Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Planar => hdgc::Metric::Planar,
            MetricArg::Geographic => hdgc::Metric::Geographic,
        }
    }
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the configured per-period missing-rate exclusion threshold.
    #[arg(long)]
    missing_threshold: Option<f64>,
    /// Overrides the configured distance metric.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated recovery study on a synthetic grid.
    Simulate(Common),
    /// Per-period EM fits with standard errors.
    Fit(Common),
    /// Rankings, clustering and flags from a fit output directory.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Fit output directory (overrides `input` in the config).
        input: Option<PathBuf>,
    },
}

fn required_config(c: &Common) -> CliResult<PathBuf> {
    c.config.clone().ok_or_else(|| CliError::Usage("--config is required".into()))
}

fn ignored(c: &Common, verb: &str) {
    if c.missing_threshold.is_some() || c.metric.is_some() {
        log::warn!("--missing-threshold and --metric have no effect on `{verb}`");
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Simulate(c) | Command::Fit(c) => c,
        Command::Detect { common, .. } => common,
    };
    let exec = match common.threads {
        Some(0) => return Err(CliError::Usage("--threads must be positive".into())),
        Some(1) => Execution::Sequential,
        Some(n) => {
            hdgc::exec::configure_threads(n);
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    match cli.command {
        Command::Simulate(c) => {
            ignored(&c, "simulate");
            let mut cfg: SimulateConfig = config::load(&required_config(&c)?)?;
            if let Some(seed) = c.seed {
                cfg.scenario.seed = seed;
            }
            simulate_cmd::run(&cfg, &c.out, exec)
        }
        Command::Fit(c) => {
            let path = required_config(&c)?;
            let mut cfg: RunConfig = config::load(&path)?;
            cfg.resolve(&config::base_dir(&path));
            if let Some(t) = c.missing_threshold {
                cfg.missing_threshold = t;
            }
            if let Some(m) = c.metric {
                cfg.metric = m.into();
            }
            fit_cmd::run(&cfg, &c.out, exec)
        }
        Command::Detect { common: c, input } => {
            ignored(&c, "detect");
            let (cfg, base) = match &c.config {
                Some(path) => (config::load::<DetectConfig>(path)?, config::base_dir(path)),
                None => (DetectConfig::default(), PathBuf::new()),
            };
            let input = input
                .or_else(|| cfg.input.as_ref().map(|p| base.join(p)))
                .ok_or_else(|| CliError::Usage("no fit directory given".into()))?;
            detect_cmd::run(&input, &cfg, &c.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hdgc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

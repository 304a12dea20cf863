//! Batch CLI over the library: ingest and clean quote files, de-Americanize,
//! repair arbitrage, extract densities, fit the GARCH model, estimate pricing
//! kernels and risk aversion, calibrate jump models, and run the panel
//! estimators — individually or as a full pipeline driven by a JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};


use rnx_core::config::RunConfig;
use rnx_core::pipeline::{run_pipeline, Stage};

#[derive(Parser)]
#[command(name = "rnx", version, about = "Option-implied densities, pricing kernels, and event-risk panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate quotes, exposures and fires; write the treatment calendar.
    Ingest(ConfigArg),
    /// Convert American quote prices to European via a binomial tree.
    Deamericanize(ConfigArg),
    /// Project call curves onto the no-arbitrage constraints.
    Repair(ConfigArg),
    /// Extract risk-neutral densities from repaired quotes.
    Rnd(ConfigArg),
    /// Fit the market and wildfire-augmented GARCH models and forecast a physical density.
    Garch(ConfigArg),
    /// Pricing kernels and the pooled risk-aversion elasticity.
    Kernel(ConfigArg),
    /// Calibrate the configured jump model per ticker.
    Calibrate(ConfigArg),
    /// Panel estimators (smile, binned density TE, permanent effects).
    Panel {
        #[command(flatten)]
        config: ConfigArg,
        /// Which estimator family to run (all are written by the stage).
        #[arg(long, default_value = "smile")]
        which: String,
    },
    /// Closed-form check of the kernel-elasticity proposition by Monte Carlo.
    Prop1Verify {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        q_w: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        sigma_w: f64,
        #[arg(long, default_value_t = 0.07)]
        mu: f64,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 0.02)]
        rate: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        maturity: f64,
        #[arg(long, default_value_t = 200_000)]
        n_paths: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run pipeline stages in order.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated stage subset (default: all).
        #[arg(long)]
        stages: Option<String>,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the default configuration as JSON.
    PrintDefaults,
    /// Validate a configuration file.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn init_threads(cfg: Option<&RunConfig>) {
    let from_env = std::env::var("RND_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    let n = from_env.or_else(|| cfg.map(|c| c.threads).filter(|&t| t > 0));
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_stages(path: &PathBuf, stages: &[Stage]) -> Result<()> {
    let cfg = load_config(path)?;
    init_threads(Some(&cfg));
    let manifests = run_pipeline(&cfg, stages)?;
    for m in &manifests {
        eprintln!("stage {} done ({} outputs)", m.stage, m.outputs.len());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(c) => run_stages(&c.config, &[Stage::Ingest]),
        Command::Deamericanize(c) => run_stages(&c.config, &[Stage::Deamericanize]),
        Command::Repair(c) => run_stages(&c.config, &[Stage::Repair]),
        Command::Rnd(c) => run_stages(&c.config, &[Stage::Rnd]),
        Command::Garch(c) => run_stages(&c.config, &[Stage::Garch]),
        Command::Kernel(c) => run_stages(&c.config, &[Stage::Kernel]),
        Command::Calibrate(c) => run_stages(&c.config, &[Stage::Calibrate]),
        Command::Panel { config, which: _ } => run_stages(&config.config, &[Stage::Panel]),
        Command::Prop1Verify {
            q,
            q_w,
            beta,
            sigma,
            sigma_w,
            mu,
            alpha,
            rate,
            gamma,
            maturity,
            n_paths,
            seed,
        } => {
            init_threads(None);
            let report = rnx_core::kernel::verify_prop1_mc(
                q, q_w, beta, sigma, sigma_w, mu, alpha, rate, gamma, maturity, n_paths, seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report json"));
            Ok(())
        }
        Command::Run { config, stages } => {
            let subset: Vec<Stage> = match stages {
                None => Stage::ALL.to_vec(),
                Some(list) => list
                    .split(',')
                    .map(|s| Stage::parse(s.trim()))
                    .collect::<std::result::Result<_, _>>()?,
            };
            run_stages(&config.config, &subset)
        }
        Command::Config { action } => match action {
            ConfigAction::PrintDefaults => {
                println!("{}", RunConfig::default().to_json());
                Ok(())
            }
            ConfigAction::Validate { config } => {
                load_config(&config)?;
                println!("ok");
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // library errors carry the exit-code contract (2 config, 3 data,
            // 4 numeric); anything else is a generic failure
            let code = e
                .downcast_ref::<rnx_core::Error>()
                .map(|c| c.exit_code())
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}

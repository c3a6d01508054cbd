use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use branch_mpc::ocp::PlannerMode;
use branch_mpc::sim::ScenarioKind;
use branch_mpc::verify::VerifyOptions;
use branch_mpc_cli::config::{self, Overrides};
use branch_mpc_cli::{commands, server};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "branch-mpc", version, about = "Risk-aware branch MPC runner, verifier and session service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write its artifacts.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Keep per-step trajectory trees in the log.
        #[arg(long)]
        trees: bool,
    },
    /// Run once per CVaR level and tabulate the metrics.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated levels in (0, 1].
        #[arg(long, default_value = "0.1,0.5,0.9")]
        alphas: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        trees: bool,
    },
    /// Run the oracle suites and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Multiplies the number of random cases per suite.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        /// Corrupts the analytic dynamics Jacobian (negative control).
        #[arg(long, hide = true)]
        inject_jacobian_bug: bool,
    },
    /// Serve live sessions over WebSocket at /ws.
    Serve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Directory for session logs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Wall-clock seconds per simulated second.
        #[arg(long, default_value_t = 1.0)]
        pace: f64,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Preset to start from: overtake, merge or quadruped.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<ScenarioKind>,
    /// TOML file overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long = "sqp-iters")]
    sqp_iters: Option<usize>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Branch,
    Robust,
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    ScenarioKind::from_name(s).ok_or_else(|| format!("unknown scenario `{s}` (overtake, merge, quadruped)"))
}

impl ScenarioArgs {
    fn load(&self, alpha: Option<f64>) -> Result<branch_mpc::sim::ScenarioConfig> {
        let overrides = Overrides {
            scenario: self.scenario,
            alpha,
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                Mode::Branch => PlannerMode::Branch,
                Mode::Robust => PlannerMode::Robust,
            }),
            sqp_iterations: self.sqp_iters,
            duration: self.duration,
        };
        Ok(config::load(self.config.as_deref(), &overrides)?)
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            scenario,
            alpha,
            out,
            trees,
        } => {
            let config = scenario.load(alpha)?;
            let a = commands::run(&config, &out, trees)?;
            println!("{}", branch_mpc::sim::Metrics::CSV_HEADER);
            println!("{}", a.metrics_row.csv_row());
            println!("wrote {}, {}, {}", a.log.display(), a.metrics.display(), a.config.display());
            Ok(true)
        }
        Command::Sweep {
            scenario,
            alphas,
            out,
            trees,
        } => {
            let alphas = commands::parse_alphas(&alphas)?;
            let config = scenario.load(None)?;
            let rows = commands::sweep(&config, &alphas, &out, trees)?;
            println!("alpha,{}", branch_mpc::sim::Metrics::CSV_HEADER);
            for (a, m) in rows {
                println!("{a},{}", m.csv_row());
            }
            Ok(true)
        }
        Command::Verify {
            seed,
            scale,
            inject_jacobian_bug,
        } => {
            let opts = VerifyOptions {
                seed,
                inject_jacobian_bug,
            };
            let reports = commands::verify(&opts, scale, &mut std::io::stdout())?;
            Ok(reports.iter().all(|r| r.passed()))
        }
        Command::Serve {
            scenario,
            port,
            host,
            out,
            pace,
        } => {
            anyhow::ensure!(pace.is_finite() && pace > 0.0, "--pace must be positive");
            let base = scenario.load(None)?;
            let config = server::ServerConfig {
                base,
                log_dir: out,
                pace,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::bind_and_serve(SocketAddr::new(host, port), config))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

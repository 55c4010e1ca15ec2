use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use hybrid_market::eua::load_scenario_file;
use hybrid_market::futures::FuturesOutcome;
use hybrid_market::metrics::{export_reports, render_reports, Format, MetricsReport};
use hybrid_market::model::Scenario;
use hybrid_market::transaction::{run_monte_carlo, MonteCarloOptions};
use hybrid_market::verify::{audit_futures, AuditOptions};
use hybrid_market::MechanismRegistry;

/// Default worker count when `--threads` is absent.
const THREADS_ENV: &str = "HYBRID_MARKET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "hybrid-market", version, about = "Futures/spot edge-cloud market simulator")]
struct Cli {
    /// Monte-Carlo worker threads (falls back to HYBRID_MARKET_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Report RT as 0 so that exports are byte-stable.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json; inferred from `--out` when absent.
    #[arg(long)]
    format: Option<Format>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte-Carlo run of one mechanism.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "hybrid")]
        mechanism: String,
    },
    /// Re-sign futures for each overbooking rate and simulate.
    SweepTau {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "hybrid")]
        mechanism: String,
        #[arg(long, default_value_t = 0.0)]
        from: f64,
        #[arg(long, default_value_t = 0.5)]
        to: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
    },
    /// All registered mechanisms on one scenario and seed.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Audit a futures outcome; exits non-zero when anything fails.
    Verify {
        #[arg(long)]
        scenario: PathBuf,
        /// Outcome JSON to audit; computed with `--mechanism` when absent.
        #[arg(long)]
        outcome: Option<PathBuf>,
        #[arg(long, default_value = "hybrid")]
        mechanism: String,
        /// Max contract-set size for exhaustive removal search.
        #[arg(long, default_value_t = 12)]
        subset_cap: usize,
        /// Max ESs in a coalition.
        #[arg(long, default_value_t = 3)]
        coalition_size: usize,
        /// Write the computed outcome here as JSON.
        #[arg(long)]
        save_outcome: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn threads(cli: &Cli) -> anyhow::Result<Option<usize>> {
    if let Some(n) = cli.threads {
        return Ok(Some(n.max(1)));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => Ok(Some(v.parse::<usize>().with_context(|| format!("{THREADS_ENV}={v}"))?.max(1))),
        Err(_) => Ok(None),
    }
}

fn load(path: &Path) -> anyhow::Result<Scenario> {
    load_scenario_file(path).with_context(|| format!("loading scenario {}", path.display()))
}

fn emit(reports: &[MetricsReport], run: &RunArgs) -> anyhow::Result<()> {
    let format = run.format.unwrap_or_else(|| run.out.as_deref().map(Format::for_path).unwrap_or(Format::Csv));
    match &run.out {
        Some(p) => export_reports(reports, p, format).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", render_reports(reports, format)?),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let registry = MechanismRegistry::builtin();
    let opts = MonteCarloOptions { timing: !cli.no_timing, threads: threads(&cli)? };
    match &cli.cmd {
        Command::Simulate { run, mechanism } => {
            let scenario = load(&run.scenario)?;
            let m = registry.get(mechanism)?;
            let report = run_monte_carlo(&scenario, m, run.runs, run.seed, opts)?;
            emit(&[report], run)?;
        }
        Command::SweepTau { run, mechanism, from, to, step } => {
            if !(*step > 0.0) || to < from {
                bail!("sweep needs step > 0 and to >= from");
            }
            let base = load(&run.scenario)?;
            let m = registry.get(mechanism)?;
            let mut reports = Vec::new();
            let n = ((to - from) / step + 1e-9).floor() as usize;
            for t in 0..=n {
                let mut scenario = base.clone();
                scenario.params.tau = from + t as f64 * step;
                let mut report = run_monte_carlo(&scenario, m, run.runs, run.seed, opts)?;
                report.mechanism = format!("{}@tau={:.4}", report.mechanism, scenario.params.tau);
                reports.push(report);
            }
            emit(&reports, run)?;
        }
        Command::Compare { run } => {
            let scenario = load(&run.scenario)?;
            let reports = registry
                .names()
                .iter()
                .map(|name| run_monte_carlo(&scenario, registry.get(name)?, run.runs, run.seed, opts))
                .collect::<Result<Vec<_>, _>>()?;
            emit(&reports, run)?;
        }
        Command::Verify { scenario, outcome, mechanism, subset_cap, coalition_size, save_outcome } => {
            let scenario = load(scenario)?;
            let futures: FuturesOutcome = match outcome {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("parsing outcome {}", p.display()))?,
                None => registry.get(mechanism)?.prepare(&scenario)?,
            };
            if let Some(p) = save_outcome {
                std::fs::write(p, serde_json::to_string_pretty(&futures)?)?;
            }
            let audit = audit_futures(
                &scenario,
                &futures,
                AuditOptions { subset_cap: *subset_cap, coalition_size: *coalition_size, ..Default::default() },
            );
            println!("{}", serde_json::to_string_pretty(&audit)?);
            if !audit.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

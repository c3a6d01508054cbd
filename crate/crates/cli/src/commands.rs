//! Headless subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use branch_mpc::risk::{RiskKind, RiskSpec};
use branch_mpc::sim::{metrics, run_closed_loop, Metrics, ScenarioConfig, SimLog};
use branch_mpc::verify::{self, SuiteReport, VerifyOptions};

/// Files written by one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub log: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
    pub metrics_row: Metrics,
}

fn describe_risk(risk: &RiskSpec) -> String {
    match risk.kind {
        RiskKind::Expectation => "expectation".into(),
        // alpha is the tail mass; some texts quote the confidence level 1 - alpha
        RiskKind::Cvar => format!("CVaR alpha={} (confidence level 1-alpha={})", risk.alpha, 1.0 - risk.alpha),
    }
}

fn write_log(log: &SimLog, path: &Path, trees: bool) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    if trees {
        log.write_jsonl(BufWriter::new(f))?;
    } else {
        let mut slim = log.clone();
        for r in &mut slim.records {
            r.tree = None;
        }
        slim.write_jsonl(BufWriter::new(f))?;
    }
    Ok(())
}

/// Runs one closed-loop simulation and writes `log.jsonl`, `metrics.csv`
/// and the resolved `config.toml` into `out`. Trees are kept in the log
/// only when `trees` is set.
pub fn run(config: &ScenarioConfig, out: &Path, trees: bool) -> Result<RunArtifacts> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    eprintln!(
        "running {} for {} s, seed {}, {:?} planner, {}",
        config.kind.name(),
        config.duration,
        config.seed,
        config.planner.mode,
        describe_risk(&config.planner.risk)
    );
    let log = run_closed_loop(config)?;
    let m = metrics(&log)?;
    let artifacts = RunArtifacts {
        log: out.join("log.jsonl"),
        metrics: out.join("metrics.csv"),
        config: out.join("config.toml"),
        metrics_row: m.clone(),
    };
    write_log(&log, &artifacts.log, trees)?;
    fs::write(&artifacts.metrics, format!("{}\n{}\n", Metrics::CSV_HEADER, m.csv_row()))?;
    fs::write(&artifacts.config, toml::to_string(config)?)?;
    Ok(artifacts)
}

/// Parses `0.1,0.5,0.9`; every value must be a valid CVaR level.
pub fn parse_alphas(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            let a: f64 = s.trim().parse().with_context(|| format!("`{s}` is not a number"))?;
            RiskSpec::cvar(a)?;
            Ok(a)
        })
        .collect()
}

/// One run per alpha under `out/alpha_<a>/`, plus `out/metrics.csv` with one
/// row per alpha.
pub fn sweep(config: &ScenarioConfig, alphas: &[f64], out: &Path, trees: bool) -> Result<Vec<(f64, Metrics)>> {
    anyhow::ensure!(!alphas.is_empty(), "no alphas given");
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut c = config.clone();
        c.planner.risk = RiskSpec::cvar(alpha)?;
        let a = run(&c, &out.join(format!("alpha_{alpha}")), trees)?;
        rows.push((alpha, a.metrics_row));
    }
    let path = out.join("metrics.csv");
    let mut f = BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?);
    writeln!(f, "alpha,{}", Metrics::CSV_HEADER)?;
    for (alpha, m) in &rows {
        writeln!(f, "{alpha},{}", m.csv_row())?;
    }
    f.flush()?;
    Ok(rows)
}

/// Runs every oracle suite and prints one table row per suite.
pub fn verify(opts: &VerifyOptions, scale: usize, out: &mut impl Write) -> Result<Vec<SuiteReport>> {
    let reports = verify::run_all(opts, scale);
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    writeln!(out, "{} suites, {failed} failed", reports.len())?;
    Ok(reports)
}

//! `uavtrack`: run scenarios, sweep a parameter, or re-report a run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use uavtrack::scenario::report::compute_report;
use uavtrack::scenario::{run, RunError, RunOptions, RunReport, ScenarioConfig};

#[derive(Parser)]
#[command(name = "uavtrack", version, about = "Multi-UAV target tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its logs.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario duration, seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Extra `path=value` overrides, e.g. `cbf.gamma_o=0.5`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
    /// Run a scenario once per value of a parameter.
    Sweep {
        config: PathBuf,
        /// Dotted parameter path, e.g. `cbf.gamma_o`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Recompute and print the report of an existing run directory.
    Report {
        run_dir: PathBuf,
        /// Print only the JSON summary.
        #[arg(long)]
        json: bool,
    },
}

fn overrides(seed: Option<u64>, duration: Option<f64>, set: &[String]) -> Result<Vec<(String, String)>> {
    let mut o = Vec::new();
    if let Some(s) = seed {
        o.push(("seed".to_string(), s.to_string()));
    }
    if let Some(d) = duration {
        o.push(("duration".to_string(), format!("{d:?}")));
    }
    for s in set {
        let Some((k, v)) = s.split_once('=') else {
            bail!("override {s:?} is not PATH=VALUE")
        };
        o.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(o)
}

fn run_one(cfg: &ScenarioConfig, out: &Path) -> Result<RunReport> {
    match run(
        cfg,
        &RunOptions {
            out_dir: out.to_path_buf(),
        },
    ) {
        Ok((report, dir)) => {
            eprintln!("logs: {}", dir.display());
            Ok(report)
        }
        Err(RunError::Tick {
            tick,
            agent,
            source,
            partial: Some(report),
        }) => {
            eprintln!("run aborted at tick {tick}, agent {agent}: {source}");
            Ok(*report)
        }
        Err(e) => Err(e.into()),
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            duration,
            out,
            set,
        } => {
            let cfg = ScenarioConfig::load(&config, &overrides(seed, duration, &set)?)
                .with_context(|| format!("loading {}", config.display()))?;
            let report = run_one(&cfg, &out)?;
            print!("{}", report.to_table());
            Ok(report.audits.all_pass())
        }
        Command::Sweep {
            config,
            param,
            values,
            seed,
            duration,
            out,
        } => {
            let mut all = true;
            println!(
                "{:>12} {:>10} {:>10} {:>10} {:>12} {:>7}",
                param, "min_pair", "max_pair", "clearance", "occl_margin", "audits"
            );
            for v in &values {
                let mut o = overrides(seed, duration, &[])?;
                o.push((param.clone(), v.clone()));
                let cfg = ScenarioConfig::load(&config, &o).with_context(|| format!("loading {}", config.display()))?;
                let r = run_one(&cfg, &out)?;
                let f = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.3}"));
                println!(
                    "{:>12} {:>10} {:>10} {:>10} {:>12} {:>7}",
                    v,
                    f(r.min_pair_distance),
                    f(r.max_pair_distance),
                    f(r.min_obstacle_clearance),
                    f(r.min_occlusion_margin_deg),
                    if r.audits.all_pass() { "pass" } else { "FAIL" }
                );
                all &= r.audits.all_pass();
            }
            Ok(all)
        }
        Command::Report { run_dir, json } => {
            let report = compute_report(&run_dir).with_context(|| format!("reading {}", run_dir.display()))?;
            if !json {
                print!("{}", report.to_table());
            }
            println!("{}", serde_json::to_string(&report)?);
            Ok(report.audits.all_pass())
        }
    }
}

//! The `grokscale` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_job, JobSpec};
use crate::error::{Error, Result};
use crate::pipelines::ExperimentKind;
use crate::registry::{dispatch, DispatchOptions, DispatchSummary, Registry};
use crate::report::{emit_report, grok_report, write_stats_report, Coverage};
use crate::stats::{read_onset_table, run_battery, BatteryOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "grokscale", version, about = "Capacity, learning-speed and grokking-onset sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Job file (YAML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, global = true, default_value = "registry")]
    pub registry: PathBuf,
    /// Drop widths above this from the grid.
    #[arg(long, global = true)]
    pub max_dim: Option<usize>,
    /// First seed for `seed_count` jobs; permutation and bootstrap seed for `stats`.
    #[arg(long, global = true)]
    pub seed_base: Option<u64>,
    /// Report directory; defaults to the job's `output` or `<registry>/reports/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random-label capacity sweep.
    Capacity,
    /// Memorisation-speed sweep.
    Speed,
    /// Modular-arithmetic grokking sweep.
    Grok,
    /// Grok sweep plus its matched speed runs; writes the onset table.
    Intersect,
    /// Statistical battery over an onset table CSV.
    Stats {
        /// CSV with columns cell, pred_log10, emp_log10, covariates...
        table: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n_perm: usize,
        #[arg(long, default_value_t = 10_000)]
        n_boot: usize,
    },
    /// Rebuild a job's report from the registry without running anything.
    Report,
}

enum Failure {
    Config(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::ConfigParse(_) => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

/// Parses the process arguments and runs; returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    run(&cli)
}

pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            EXIT_PARTIAL
        }
    }
}

fn read_job(cli: &Cli, expected: Option<ExperimentKind>) -> std::result::Result<JobSpec, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Config("--config <file> is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut job = load_job(&text)?;
    if let Some(base) = cli.seed_base {
        job = job.with_seed_base(base)?;
    }
    if let Some(k) = expected {
        if job.kind != k {
            return Err(Failure::Config(format!("job kind is {}, command expects {}", job.kind.as_str(), k.as_str())));
        }
    }
    Ok(job)
}

fn out_dir(cli: &Cli, job: Option<&JobSpec>, name: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| job.and_then(|j| j.output.clone()))
        .unwrap_or_else(|| cli.registry.join("reports").join(name))
}

fn print_dispatch(s: &DispatchSummary) {
    println!("runs: {} total, {} already done, {} executed, {} failed", s.total, s.skipped, s.executed, s.failed.len());
    for (id, msg) in &s.failed {
        println!("failed {}: {msg}", &id[..12]);
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn print_coverage(c: &Coverage) {
    if !c.complete() {
        println!("{}", c.summary());
    }
}

fn execute(cli: &Cli) -> std::result::Result<i32, Failure> {
    let opts = DispatchOptions { workers: cli.workers, retry_failed: true, max_runs: None, progress: true };
    if cli.workers == 0 {
        return Err(Failure::Config("--workers must be at least 1".into()));
    }
    match &cli.command {
        Command::Capacity | Command::Speed | Command::Grok => {
            let kind = match cli.command {
                Command::Capacity => ExperimentKind::Capacity,
                Command::Speed => ExperimentKind::Speed,
                _ => ExperimentKind::Grok,
            };
            let job = read_job(cli, Some(kind))?;
            let specs = job.expand(cli.max_dim)?;
            let registry = Registry::open(&cli.registry)?;
            let summary = dispatch(&registry, &specs, &opts)?;
            print_dispatch(&summary);
            let (files, coverage) = emit_report(&registry, &job, cli.max_dim, &out_dir(cli, Some(&job), kind.as_str()))?;
            print_files(&files);
            print_coverage(&coverage);
            Ok(if summary.failed.is_empty() && coverage.complete() { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Intersect => {
            let job = read_job(cli, Some(ExperimentKind::Grok))?;
            let mut specs = job.expand(cli.max_dim)?;
            specs.extend(job.matched_speed_job().expand(cli.max_dim)?);
            let registry = Registry::open(&cli.registry)?;
            let summary = dispatch(&registry, &specs, &opts)?;
            print_dispatch(&summary);
            let out = out_dir(cli, Some(&job), "intersect");
            let complete = write_intersection(&registry, &job, cli.max_dim, &out)?;
            Ok(if summary.failed.is_empty() && complete { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Report => {
            let job = read_job(cli, None)?;
            let registry = Registry::open(&cli.registry)?;
            let out = out_dir(cli, Some(&job), job.kind.as_str());
            let complete = if job.kind == ExperimentKind::Grok {
                write_intersection(&registry, &job, cli.max_dim, &out)?
            } else {
                let (files, coverage) = emit_report(&registry, &job, cli.max_dim, &out)?;
                print_files(&files);
                print_coverage(&coverage);
                coverage.complete()
            };
            Ok(if complete { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Stats { table, n_perm, n_boot } => {
            let file = fs::File::open(table).map_err(|e| Failure::Config(format!("cannot read {}: {e}", table.display())))?;
            let table = read_onset_table(file).map_err(|e| Failure::Config(e.to_string()))?;
            let opts = BatteryOptions { n_perm: *n_perm, n_boot: *n_boot, seed: cli.seed_base.unwrap_or(0) };
            let report = run_battery(&table, &opts)?;
            print!("{}", report.render_table());
            print_files(&write_stats_report(&report, &out_dir(cli, None, "stats"))?);
            Ok(EXIT_OK)
        }
    }
}

/// Grok report plus `onset_table.csv`; returns whether every grok and
/// matched speed run was present.
fn write_intersection(registry: &Registry, job: &JobSpec, max_dim: Option<usize>, out: &Path) -> Result<bool> {
    let report = grok_report(registry, job, max_dim)?;
    let files = report.write(out)?;
    print_files(&files);
    let table = report.onset_table(job);
    let path = out.join("onset_table.csv");
    fs::write(&path, table.to_csv())?;
    println!("wrote {}", path.display());
    for c in &report.cells {
        let e = &c.estimate;
        println!(
            "{}: onset {} crossing {}{}",
            c.cell,
            e.p_onset.map_or_else(|| "absent".to_string(), |p| p.to_string()),
            e.p_cross.map_or_else(|| "absent".to_string(), |p| format!("{p:.0}")),
            match c.log_ratio() {
                Some(r) => format!(" log10 ratio {r:+.3}"),
                None => format!(" ({})", c.note()),
            }
        );
    }
    print_coverage(&report.coverage);
    if !report.mem_coverage.complete() {
        println!("matched speed runs: {}", report.mem_coverage.summary());
    }
    Ok(report.coverage.complete() && report.mem_coverage.complete())
}

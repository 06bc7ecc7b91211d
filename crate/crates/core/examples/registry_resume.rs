//! Interrupts a sweep after two runs, then re-dispatches: finished runs are
//! skipped and the rest complete.

use grokscale::config::load_job;
use grokscale::registry::{dispatch, DispatchOptions, Registry};

const JOB: &str = "
kind: capacity
vocab_size: 7
dims: [4, 6]
seeds: [1]
n_grid: [8, 32, 128]
train: { max_epochs: 200, plateau_patience: 20 }
";

fn main() -> grokscale::Result<()> {
    let dir = tempfile_dir();
    let registry = Registry::open(&dir)?;
    let specs = load_job(JOB)?.expand(None)?;
    let first = dispatch(&registry, &specs, &DispatchOptions { max_runs: Some(2), ..Default::default() })?;
    println!("first pass: executed {} of {}", first.executed, first.total);
    let second = dispatch(&registry, &specs, &DispatchOptions { workers: 2, ..Default::default() })?;
    println!("second pass: skipped {}, executed {}", second.skipped, second.executed);
    for (id, (status, _)) in registry.snapshot()? {
        println!("  {} {:?}", &id[..12], status);
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("grokscale-resume-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

//! Predicted grokking onset: where the generalisation-speed curve crosses
//! the matched memorisation-speed curve, next to the empirical onset. Runs
//! go through a registry, so a second invocation reuses them.

use grokscale::config::load_job;
use grokscale::registry::{dispatch, DispatchOptions, Registry};
use grokscale::report::grok_report;

const JOB: &str = "
kind: grok
primes: [7]
dims: [2, 4, 8, 16]
seeds: [1, 2]
c_model: 2.0
train: { batch_size: 8, max_epochs: 400 }
";

fn main() -> grokscale::Result<()> {
    let job = load_job(JOB)?;
    let registry = Registry::open(std::env::temp_dir().join("grokscale-intersection-example"))?;
    let mut specs = job.expand(None)?;
    specs.extend(job.matched_speed_job().expand(None)?);
    let summary = dispatch(&registry, &specs, &DispatchOptions { workers: 2, ..Default::default() })?;
    println!("{} runs, {} reused", summary.total, summary.skipped);
    let report = grok_report(&registry, &job, None)?;
    for c in &report.cells {
        let e = &c.estimate;
        println!("{}: P_mem {:?}, onset {:?}, crossing {:?}", c.cell, e.p_mem.map(f64::round), e.p_onset, e.p_cross.map(f64::round));
        match c.log_ratio() {
            Some(r) => println!("  log10(onset / crossing) = {r:+.3}"),
            None => println!("  {}", c.note()),
        }
    }
    Ok(())
}

//! Memorisation speed: epochs to fit random labels carrying a modular task's
//! bits, against capacity fraction.

use grokscale::datasets::{Operation, TaskSpec};
use grokscale::model::ModelConfig;
use grokscale::pipelines::{fit_speed_exponential, run_speed_sweep};
use grokscale::training::TrainConfig;

fn main() -> grokscale::Result<()> {
    let task = TaskSpec::new(7, Operation::Div, 0.5, 0);
    let train = TrainConfig { batch_size: 32, max_epochs: 1000, ..TrainConfig::default() };
    let c_model = 2.0;
    let curve = run_speed_sweep(&task, &[4, 8, 12, 16], &[1, 2], &ModelConfig::new(task.vocab_size(), 4), &train, c_model, 2)?;
    for p in &curve.points {
        println!("d={} P={} f={:.3} mean T_mem {:?} ({} censored)", p.dim, p.params, p.f.unwrap(), p.mean, p.censored_seeds);
    }
    let pts: Vec<(f64, f64)> = curve.points.iter().filter_map(|p| Some((p.f?, p.mean?))).collect();
    match fit_speed_exponential(&pts) {
        Ok(f) => println!("T = {:.2} exp({:.2} f), R^2 {:.3}", f.b, f.a, f.r2),
        Err(e) => println!("no exponential fit: {e}"),
    }
    Ok(())
}

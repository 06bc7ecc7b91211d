//! Generalisation delay across widths on a small prime, with the regime of
//! each width and the onset, if any.

use grokscale::datasets::{Operation, TaskSpec};
use grokscale::model::ModelConfig;
use grokscale::pipelines::{onset_from_points, run_grok_sweep};
use grokscale::training::TrainConfig;

fn main() -> grokscale::Result<()> {
    let task = TaskSpec::new(7, Operation::Div, 0.5, 0);
    let train = TrainConfig { batch_size: 8, max_epochs: 400, ..TrainConfig::default() };
    let (points, gen) = run_grok_sweep(&task, &[2, 4, 8, 16], &[1, 2], &ModelConfig::new(task.vocab_size(), 4), &train, 2)?;
    for p in &points {
        println!("d={:2} P={:5} {:?} delta E {:?} all generalised {}", p.dim, p.params, p.regime, p.delta_e, p.all_generalised);
    }
    println!("T_gen by P: {:?}", gen.means());
    match onset_from_points(&points)? {
        Some(p) => println!("onset at P = {p}"),
        None => println!("onset absent in range"),
    }
    Ok(())
}

//! Trains one small Transformer on modular addition and prints the
//! accuracy trajectory and saturation events.

use grokscale::datasets::{build_modular_dataset, Operation, TaskSpec};
use grokscale::model::ModelConfig;
use grokscale::training::{train_run, StopRule, TrainConfig};

fn main() -> grokscale::Result<()> {
    let data = build_modular_dataset(&TaskSpec::new(11, Operation::Add, 0.5, 0))?;
    let model = ModelConfig::new(data.vocab_size, 32);
    let train = TrainConfig { batch_size: 16, max_epochs: 300, stop_rule: StopRule::Generalisation, ..TrainConfig::default() };
    let rec = train_run(&data, &model, &train, 7)?;
    println!("P = {}, {} epochs, {:?}", rec.param_count, rec.epochs_run(), rec.termination);
    for r in rec.trace.iter().step_by(25) {
        println!("epoch {:4}  train acc {:.3}  val acc {:.3}", r.epoch, r.train_acc, r.val_acc.unwrap_or(f64::NAN));
    }
    println!("events: {:?}", rec.events);
    Ok(())
}

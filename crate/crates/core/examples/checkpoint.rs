//! Saves a trained model to bytes and restores it bit-exactly.

use grokscale::datasets::{build_random_dataset, RandomLabelSpec};
use grokscale::metrics::total_memorisation;
use grokscale::model::{ModelConfig, ModelState};
use grokscale::training::{train_run_with_state, TrainConfig};

fn main() -> grokscale::Result<()> {
    let data = build_random_dataset(&RandomLabelSpec::new(13, 64, 3))?;
    let model = ModelConfig { dropout_rate: 0.0, ..ModelConfig::new(13, 8) };
    let (_, state) = train_run_with_state(&data, &model, &TrainConfig { max_epochs: 200, ..TrainConfig::default() }, 1)?;
    let path = std::env::temp_dir().join("grokscale-example.ckpt");
    std::fs::write(&path, state.to_checkpoint())?;
    let restored = ModelState::from_checkpoint(&std::fs::read(&path)?)?;
    let (a, b) = (total_memorisation(&state, &data)?, total_memorisation(&restored, &data)?);
    println!("wrote {} ({} parameters)", path.display(), restored.param_count());
    println!("M_T before {:.6} bits, after {:.6} bits, identical: {}", a.total_bits, b.total_bits, a == b);
    Ok(())
}

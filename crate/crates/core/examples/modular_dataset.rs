//! Builds a modular-division dataset, prints its split and information
//! content, and the random-label size carrying the same number of bits.

use grokscale::datasets::{build_modular_dataset, dataset_complexity, equivalent_random_size, Operation, TaskSpec};

fn main() -> grokscale::Result<()> {
    let task = TaskSpec::new(23, Operation::Div, 0.5, 0);
    let data = build_modular_dataset(&task)?;
    println!("p = {}, vocabulary {}, {} train / {} test equations", task.prime, data.vocab_size, data.train.len(), data.test.len());
    for ex in data.train.iter().take(5) {
        println!("  tokens {:?} -> {}", ex.tokens, ex.label);
    }
    let k = dataset_complexity(task.prime, task.train_fraction, task.operation);
    println!("K = {k:.2} bits; equivalent random-label set: {} examples", equivalent_random_size(k, data.vocab_size)?);
    Ok(())
}

//! Memorisation in bits, accuracy, and capacity-fraction bookkeeping.

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetPair, TokenizedExample};
use crate::error::{invalid_input, Result};
use crate::model::{predict_logits, ModelState};

/// Log2 probabilities are floored here so a single confidently wrong
/// prediction costs at most 64 bits.
pub const LOG2_PROB_FLOOR: f64 = -64.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorisationReport {
    pub total_bits: f64,
    pub n: usize,
    pub vocab_size: usize,
    pub bits_per_example: f64,
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|l| (l - mx).exp()).sum::<f64>().ln()
}

/// Sum over examples of `log2 V + log2 p(y | x)` from raw logits `[n, V]`.
pub fn memorisation_from_logits(logits: &[f64], labels: &[u32], vocab_size: usize) -> f64 {
    let log2v = (vocab_size as f64).log2();
    logits
        .chunks(vocab_size)
        .zip(labels)
        .map(|(row, &y)| {
            let log2p = (row[y as usize] - log_sum_exp(row)) / std::f64::consts::LN_2;
            log2v + log2p.max(LOG2_PROB_FLOOR)
        })
        .sum()
}

/// Total memorisation of the model on the training split, without dropout.
pub fn total_memorisation(model: &ModelState, data: &DatasetPair) -> Result<MemorisationReport> {
    if model.config.vocab_size != data.vocab_size {
        return Err(invalid_input(format!(
            "model vocabulary {} != dataset vocabulary {}",
            model.config.vocab_size, data.vocab_size
        )));
    }
    let logits = predict_logits(model, &data.train)?;
    let labels: Vec<u32> = data.train.iter().map(|e| e.label).collect();
    let total_bits = memorisation_from_logits(&logits, &labels, data.vocab_size);
    let n = data.train.len();
    Ok(MemorisationReport {
        total_bits,
        n,
        vocab_size: data.vocab_size,
        bits_per_example: if n == 0 { 0.0 } else { total_bits / n as f64 },
    })
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_from_logits(logits: &[f64], labels: &[u32], vocab_size: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .chunks(vocab_size)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y as usize)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn accuracy(model: &ModelState, examples: &[TokenizedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(invalid_input("accuracy of an empty example set"));
    }
    Ok(evaluate(model, examples)?.accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub accuracy: f64,
}

/// Full-set loss and accuracy in one forward pass.
pub fn evaluate(model: &ModelState, examples: &[TokenizedExample]) -> Result<Evaluation> {
    let v = model.config.vocab_size;
    let logits = predict_logits(model, examples)?;
    let labels: Vec<u32> = examples.iter().map(|e| e.label).collect();
    let loss = logits
        .chunks(v)
        .zip(&labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y as usize])
        .sum::<f64>()
        / labels.len().max(1) as f64;
    Ok(Evaluation { loss, accuracy: accuracy_from_logits(&logits, &labels, v) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityFraction {
    pub f: f64,
    pub complexity_bits: f64,
    pub c_model: f64,
    pub params: usize,
}

/// Dataset bits over estimated model capacity `C_model * P`.
pub fn capacity_fraction(complexity_bits: f64, c_model: f64, params: usize) -> Result<CapacityFraction> {
    if !(c_model > 0.0) || params == 0 {
        return Err(invalid_input(format!(
            "capacity denominator must be positive (C_model={c_model}, P={params})"
        )));
    }
    Ok(CapacityFraction {
        f: complexity_bits / (c_model * params as f64),
        complexity_bits,
        c_model,
        params,
    })
}

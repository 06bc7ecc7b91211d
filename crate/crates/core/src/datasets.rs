//! Modular-arithmetic and random-label datasets.
//!
//! Equations `a op b =` are tokenised as `[a, op, b, =]`: operands keep their
//! own value as token id, the operator takes id `p` and the equals sign id
//! `p + 1`, so the vocabulary holds `p + 2` symbols.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};

/// Every example is a length-4 token sequence.
pub const SEQ_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Add,
    Sub,
    Mul,
    Div,
}

impl Operation {
    pub fn as_str(self) -> &'static str {
        match self {
            Operation::Add => "add",
            Operation::Sub => "sub",
            Operation::Mul => "mul",
            Operation::Div => "div",
        }
    }

    /// Number of enumerated `(a, b)` pairs for prime `p`.
    pub fn pair_count(self, p: u64) -> u64 {
        match self {
            Operation::Div => p * (p - 1),
            _ => p * p,
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Operation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "+" => Ok(Operation::Add),
            "sub" | "-" => Ok(Operation::Sub),
            "mul" | "*" => Ok(Operation::Mul),
            "div" | "/" => Ok(Operation::Div),
            other => Err(invalid_input(format!("unknown operation {other:?}"))),
        }
    }
}

/// Deterministic trial-division primality check.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut i = 3u64;
    while i * i <= n {
        if n % i == 0 {
            return false;
        }
        i += 2;
    }
    true
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % m;
        }
        base = base * base % m;
        exp >>= 1;
    }
    acc
}

/// Multiplicative inverse of `b` modulo prime `p` (Fermat's little theorem).
pub fn mod_inverse(b: u64, p: u64) -> Result<u64> {
    if !is_prime(p) {
        return Err(invalid_input(format!("modulus {p} is not prime")));
    }
    if b % p == 0 {
        return Err(invalid_input("zero has no multiplicative inverse"));
    }
    Ok(pow_mod(b, p - 2, p))
}

/// `a op b (mod p)`; division is `a * b^-1`.
pub fn eval_modular(a: u64, b: u64, op: Operation, p: u64) -> Result<u64> {
    if !is_prime(p) {
        return Err(invalid_input(format!("modulus {p} is not prime")));
    }
    if a >= p || b >= p {
        return Err(invalid_input(format!("operands ({a}, {b}) out of range for p={p}")));
    }
    Ok(match op {
        Operation::Add => (a + b) % p,
        Operation::Sub => (a + p - b) % p,
        Operation::Mul => a * b % p,
        Operation::Div => {
            if b == 0 {
                return Err(invalid_input("division by zero divisor"));
            }
            a * mod_inverse(b, p)? % p
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub prime: u64,
    pub operation: Operation,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl TaskSpec {
    pub fn new(prime: u64, operation: Operation, train_fraction: f64, split_seed: u64) -> Self {
        TaskSpec { prime, operation, train_fraction, split_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prime < 5 || !is_prime(self.prime) {
            return Err(invalid_input(format!("p={} must be a prime >= 5", self.prime)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid_input(format!(
                "train fraction {} must lie strictly inside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.prime as usize + 2
    }

    pub fn full_size(&self) -> usize {
        self.operation.pair_count(self.prime) as usize
    }

    pub fn train_size(&self) -> usize {
        train_count(self.train_fraction, self.full_size())
    }
}

fn train_count(alpha: f64, full: usize) -> usize {
    (alpha * full as f64).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub tokens: [u32; SEQ_LEN],
    pub label: u32,
}

impl TokenizedExample {
    /// Encodes `a op b =` with its result.
    pub fn equation(a: u64, b: u64, label: u64, p: u64) -> Self {
        TokenizedExample {
            tokens: [a as u32, p as u32, b as u32, p as u32 + 1],
            label: label as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPair {
    pub train: Vec<TokenizedExample>,
    pub test: Vec<TokenizedExample>,
    pub vocab_size: usize,
    /// Bits needed to specify every training label under a uniform prior.
    pub complexity_bits: f64,
}

impl DatasetPair {
    pub fn has_test(&self) -> bool {
        !self.test.is_empty()
    }
}

/// Enumerates every valid pair, shuffles with the split seed and cuts the
/// first `floor(alpha * N_full)` pairs off as the training set.
pub fn build_modular_dataset(spec: &TaskSpec) -> Result<DatasetPair> {
    spec.validate()?;
    let p = spec.prime;
    let mut all = Vec::with_capacity(spec.full_size());
    let b_start = if spec.operation == Operation::Div { 1 } else { 0 };
    for a in 0..p {
        for b in b_start..p {
            let y = eval_modular(a, b, spec.operation, p)?;
            all.push(TokenizedExample::equation(a, b, y, p));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.split_seed);
    all.shuffle(&mut rng);
    let n_train = train_count(spec.train_fraction, all.len());
    let test = all.split_off(n_train);
    let vocab_size = spec.vocab_size();
    Ok(DatasetPair {
        complexity_bits: n_train as f64 * (vocab_size as f64).log2(),
        train: all,
        test,
        vocab_size,
    })
}

/// `floor(alpha * N_full) * log2(p + 2)` bits.
pub fn dataset_complexity(p: u64, alpha: f64, op: Operation) -> f64 {
    let full = op.pair_count(p) as usize;
    train_count(alpha, full) as f64 * ((p + 2) as f64).log2()
}

/// Size of a random-label dataset carrying `bits` of label information.
pub fn equivalent_random_size(bits: f64, vocab_size: usize) -> Result<usize> {
    if vocab_size < 2 {
        return Err(invalid_input(format!("vocabulary size {vocab_size} < 2")));
    }
    if !(bits >= 0.0) {
        return Err(invalid_input(format!("negative complexity {bits}")));
    }
    Ok((bits / (vocab_size as f64).log2()).round() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomLabelSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n: usize,
    pub data_seed: u64,
}

impl RandomLabelSpec {
    pub fn new(vocab_size: usize, n: usize, data_seed: u64) -> Self {
        RandomLabelSpec { vocab_size, seq_len: SEQ_LEN, n, data_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid_input(format!("vocabulary size {} < 2", self.vocab_size)));
        }
        if self.seq_len != SEQ_LEN {
            return Err(invalid_input(format!("sequence length must be {SEQ_LEN}")));
        }
        Ok(())
    }
}

/// Uniform tokens and independent uniform labels; the test split is empty.
pub fn build_random_dataset(spec: &RandomLabelSpec) -> Result<DatasetPair> {
    spec.validate()?;
    let v = spec.vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    let train = (0..spec.n)
        .map(|_| {
            let mut tokens = [0u32; SEQ_LEN];
            for t in tokens.iter_mut() {
                *t = rng.random_range(0..v);
            }
            TokenizedExample { tokens, label: rng.random_range(0..v) }
        })
        .collect();
    Ok(DatasetPair {
        train,
        test: Vec::new(),
        vocab_size: spec.vocab_size,
        complexity_bits: spec.n as f64 * (spec.vocab_size as f64).log2(),
    })
}

/// One example per line: four token ids then the label, space-separated.
pub fn write_examples<W: Write>(mut out: W, examples: &[TokenizedExample]) -> Result<()> {
    for ex in examples {
        let [a, b, c, d] = ex.tokens;
        writeln!(out, "{a} {b} {c} {d} {}", ex.label)?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(input: R) -> Result<Vec<TokenizedExample>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<u32> = line
            .split_whitespace()
            .map(|f| f.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid_input(format!("line {}: {e}", lineno + 1)))?;
        if fields.len() != SEQ_LEN + 1 {
            return Err(invalid_input(format!(
                "line {}: expected {} fields, found {}",
                lineno + 1,
                SEQ_LEN + 1,
                fields.len()
            )));
        }
        out.push(TokenizedExample {
            tokens: [fields[0], fields[1], fields[2], fields[3]],
            label: fields[4],
        });
    }
    Ok(out)
}

//! AdamW training loop, per-epoch evaluation and the stop rules used by the
//! capacity, speed and grokking experiments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetPair, TokenizedExample, SEQ_LEN};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::metrics::{evaluate, total_memorisation};
use crate::model::{init_model, loss_and_grads, param_count, ModelConfig, ModelState, Weights};

/// Which event ends a run before its epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Memorisation-speed runs: stop once train accuracy saturates.
    TrainSaturation,
    /// Grokking runs: stop once validation accuracy reaches the
    /// generalisation threshold and train saturation has been seen.
    Generalisation,
    /// Capacity runs: stop when the train loss plateaus.
    Plateau,
    /// Run the full epoch budget.
    Budget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub dropout_rate: f64,
    pub train_sat_threshold: f64,
    pub val_sat_threshold: f64,
    pub gen_sat_threshold: f64,
    pub plateau_delta: f64,
    pub plateau_patience: u32,
    pub shuffle_seed: u64,
    pub stop_rule: StopRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            betas: (0.9, 0.98),
            eps: 1e-8,
            weight_decay: 1.0,
            batch_size: 512,
            max_epochs: 5000,
            dropout_rate: 0.2,
            train_sat_threshold: 0.99,
            val_sat_threshold: 0.98,
            gen_sat_threshold: 0.99,
            plateau_delta: 1e-4,
            plateau_patience: 100,
            shuffle_seed: 0,
            stop_rule: StopRule::Budget,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("train_sat_threshold", self.train_sat_threshold),
            ("val_sat_threshold", self.val_sat_threshold),
            ("gen_sat_threshold", self.gen_sat_threshold),
        ] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(invalid_config(format!("{name}={t} outside (0, 1]")));
            }
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid_config("lr and weight_decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid_config("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid_config(format!("dropout {} outside [0, 1)", self.dropout_rate)));
        }
        if self.plateau_patience == 0 {
            return Err(invalid_config("plateau_patience must be >= 1"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one per parameter.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Weights,
    pub v: Weights,
}

impl AdamMoments {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamMoments { m: Weights::zeros(cfg), v: Weights::zeros(cfg) }
    }
}

/// Decoupled AdamW update of a flat parameter slice.
///
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)` with
/// bias-corrected moments; decay never enters the moments.
pub fn adamw_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], cfg: &TrainConfig, step: u64) {
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
}

/// One AdamW step over every tensor; `step_index` starts at 1.
pub fn adamw_step(
    params: &mut Weights,
    grads: &Weights,
    moments: &mut AdamMoments,
    cfg: &TrainConfig,
    step_index: u64,
) -> Result<()> {
    if step_index == 0 {
        return Err(invalid_input("AdamW step index starts at 1"));
    }
    let grads = grads.tensors();
    let ms = moments.m.tensors_mut();
    let vs = moments.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        adamw_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), cfg, step_index);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Saturated,
    Plateau,
    Budget,
    NumericFailure,
}

/// Where a run's data came from; enough to rebuild it bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Modular(crate::datasets::TaskSpec),
    Random(crate::datasets::RandomLabelSpec),
}

impl DataSource {
    pub fn build(&self) -> Result<DatasetPair> {
        match self {
            DataSource::Modular(t) => crate::datasets::build_modular_dataset(t),
            DataSource::Random(r) => crate::datasets::build_random_dataset(r),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            DataSource::Modular(t) => t.vocab_size(),
            DataSource::Random(r) => r.vocab_size,
        }
    }
}

/// Event epochs recomputable from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DerivedEvents {
    /// First epoch with train accuracy at or above the train threshold.
    pub e_train: Option<u32>,
    /// First epoch with validation accuracy at or above the validation threshold.
    pub e_val: Option<u32>,
    /// First epoch with validation accuracy at or above the generalisation threshold.
    pub t_gen: Option<u32>,
    /// Saturation epoch of the run's own target: `t_gen` for grokking runs,
    /// `e_train` otherwise.
    pub t_sat: Option<u32>,
}

pub fn derive_events(trace: &[EpochRecord], cfg: &TrainConfig) -> DerivedEvents {
    let train: Vec<f64> = trace.iter().map(|r| r.train_acc).collect();
    let val: Option<Vec<f64>> = trace.iter().map(|r| r.val_acc).collect();
    let e_train = detect_saturation(&train, cfg.train_sat_threshold);
    let (e_val, t_gen) = match &val {
        Some(v) if !v.is_empty() => {
            (detect_saturation(v, cfg.val_sat_threshold), detect_saturation(v, cfg.gen_sat_threshold))
        }
        _ => (None, None),
    };
    let t_sat = if cfg.stop_rule == StopRule::Generalisation { t_gen } else { e_train };
    DerivedEvents { e_train, e_val, t_gen, t_sat }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub data: Option<DataSource>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub param_count: usize,
    pub trace: Vec<EpochRecord>,
    pub termination: Termination,
    pub events: DerivedEvents,
    /// Total memorisation of the final weights on the training split.
    pub memorisation_bits: Option<f64>,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn epochs_run(&self) -> u32 {
        self.trace.last().map_or(0, |r| r.epoch)
    }

    /// Per-epoch trace as CSV: `epoch,train_loss,train_acc,val_loss,val_acc`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        let opt = |v: Option<f64>| v.map(crate::report::fmt_f64).unwrap_or_default();
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                crate::report::fmt_f64(r.train_loss),
                crate::report::fmt_f64(r.train_acc),
                opt(r.val_loss),
                opt(r.val_acc)
            ));
        }
        out
    }
}

/// First 1-based index whose value reaches `threshold`.
pub fn detect_saturation(values: &[f64], threshold: f64) -> Option<u32> {
    values.iter().position(|&a| a >= threshold).map(|i| i as u32 + 1)
}

/// Incremental plateau detector. Epoch 1 sets the baseline; later epochs
/// count as improvements only when they beat the best loss by more than
/// `delta`, and only counted improvements move the best loss.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    delta: f64,
    patience: u32,
    best: f64,
    last_improvement: u32,
    epoch: u32,
}

impl PlateauTracker {
    pub fn new(delta: f64, patience: u32) -> Self {
        PlateauTracker { delta, patience, best: f64::INFINITY, last_improvement: 0, epoch: 0 }
    }

    /// Feeds the next epoch's loss; returns true once the plateau is reached.
    pub fn push(&mut self, loss: f64) -> bool {
        self.epoch += 1;
        if self.epoch == 1 || self.best - loss > self.delta {
            self.best = loss;
            self.last_improvement = self.epoch;
        }
        self.epoch - self.last_improvement >= self.patience
    }
}

/// First epoch at which the last `patience` epochs brought no improvement.
pub fn detect_plateau(losses: &[f64], delta: f64, patience: u32) -> Option<u32> {
    let mut tracker = PlateauTracker::new(delta, patience.max(1));
    losses.iter().position(|&l| tracker.push(l)).map(|i| i as u32 + 1)
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn should_stop(cfg: &TrainConfig, rec: &EpochRecord, events: &mut DerivedEvents, plateau: &mut PlateauTracker) -> Option<Termination> {
    if events.e_train.is_none() && rec.train_acc >= cfg.train_sat_threshold {
        events.e_train = Some(rec.epoch);
    }
    if let Some(v) = rec.val_acc {
        if events.t_gen.is_none() && v >= cfg.gen_sat_threshold {
            events.t_gen = Some(rec.epoch);
        }
    }
    let plateaued = plateau.push(rec.train_loss);
    match cfg.stop_rule {
        StopRule::TrainSaturation if events.e_train.is_some() => Some(Termination::Saturated),
        StopRule::Generalisation if events.e_train.is_some() && events.t_gen.is_some() => Some(Termination::Saturated),
        StopRule::Plateau if plateaued => Some(Termination::Plateau),
        _ => None,
    }
}

/// Trains a fresh model on `data`.
///
/// `seed` is the run seed: it replaces `param_seed` and `shuffle_seed` in the
/// recorded configs and drives every dropout mask. The training config's
/// dropout rate is the one applied to the model.
pub fn train_run(data: &DatasetPair, mcfg: &ModelConfig, tcfg: &TrainConfig, seed: u64) -> Result<RunRecord> {
    Ok(train_run_with_state(data, mcfg, tcfg, seed)?.0)
}

/// As [`train_run`], also returning the final model.
pub fn train_run_with_state(
    data: &DatasetPair,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(RunRecord, ModelState)> {
    tcfg.validate()?;
    if data.train.is_empty() {
        return Err(invalid_input("training set is empty"));
    }
    let mcfg = ModelConfig { param_seed: seed, dropout_rate: tcfg.dropout_rate, ..*mcfg };
    let tcfg = TrainConfig { shuffle_seed: seed, ..*tcfg };
    if mcfg.vocab_size != data.vocab_size {
        return Err(invalid_config(format!(
            "model vocabulary {} != dataset vocabulary {}",
            mcfg.vocab_size, data.vocab_size
        )));
    }
    let mut state = init_model(&mcfg)?;
    let mut moments = AdamMoments::new(&mcfg);
    let mut trace = Vec::new();
    let mut events = DerivedEvents::default();
    let mut plateau = PlateauTracker::new(tcfg.plateau_delta, tcfg.plateau_patience);
    let mut termination = Termination::Budget;
    let mut failure = None;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let use_masks = tcfg.dropout_rate > 0.0;

    'epochs: for epoch in 1..=tcfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.shuffle_seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let tokens: Vec<[u32; SEQ_LEN]> = chunk.iter().map(|&i| data.train[i].tokens).collect();
            let labels: Vec<u32> = chunk.iter().map(|&i| data.train[i].label).collect();
            let mask = use_masks.then(|| mix_seed(&[seed, epoch as u64, bi as u64]));
            let grads = match loss_and_grads(&state, &tokens, &labels, mask) {
                Ok((_, g)) => g,
                Err(Error::NumericFailure { context }) => {
                    termination = Termination::NumericFailure;
                    failure = Some(format!("{context} (epoch {epoch}, batch {bi})"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            step += 1;
            adamw_step(&mut state.weights, &grads, &mut moments, &tcfg, step)?;
        }
        let record = match evaluate_epoch(&state, data, epoch) {
            Ok(r) => r,
            Err(Error::NumericFailure { context }) => {
                termination = Termination::NumericFailure;
                failure = Some(format!("{context} (epoch {epoch}, evaluation)"));
                break;
            }
            Err(e) => return Err(e),
        };
        trace.push(record);
        if let Some(t) = should_stop(&tcfg, &record, &mut events, &mut plateau) {
            termination = t;
            break;
        }
    }

    let memorisation_bits = if termination == Termination::NumericFailure {
        None
    } else {
        Some(total_memorisation(&state, data)?.total_bits)
    };
    let record = RunRecord {
        run_id: String::new(),
        data: None,
        model: mcfg,
        train: tcfg,
        seed,
        param_count: param_count(&mcfg),
        events: derive_events(&trace, &tcfg),
        trace,
        termination,
        memorisation_bits,
        failure,
    };
    Ok((record, state))
}

fn evaluate_epoch(state: &ModelState, data: &DatasetPair, epoch: u32) -> Result<EpochRecord> {
    let train = evaluate(state, &data.train)?;
    let (val_loss, val_acc) = if data.has_test() {
        let v = evaluate(state, &data.test)?;
        (Some(v.loss), Some(v.accuracy))
    } else {
        (None, None)
    };
    let finite = train.loss.is_finite() && val_loss.is_none_or(f64::is_finite);
    if !finite {
        return Err(Error::NumericFailure { context: "evaluation loss".into() });
    }
    Ok(EpochRecord { epoch, train_loss: train.loss, train_acc: train.accuracy, val_loss, val_acc })
}

/// Examples a trained model gets wrong; handy when inspecting traces.
pub fn misclassified<'a>(state: &ModelState, examples: &'a [TokenizedExample]) -> Result<Vec<&'a TokenizedExample>> {
    let v = state.config.vocab_size;
    let logits = crate::model::predict_logits(state, examples)?;
    Ok(examples
        .iter()
        .zip(logits.chunks(v))
        .filter(|(e, row)| crate::metrics::argmax(row) != e.label as usize)
        .map(|(e, _)| e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_modular_dataset, build_random_dataset, Operation, RandomLabelSpec, TaskSpec};

    fn scalar_step(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let cfg = TrainConfig { lr, weight_decay: wd, ..TrainConfig::default() };
        let mut t = [theta];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut t, &[g], &mut m, &mut v, &cfg, 1);
        t[0]
    }

    #[test]
    fn adamw_hand_evaluations() {
        assert_eq!(scalar_step(0.7, 0.0, 0.1, 0.0), 0.7);
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let t = scalar_step(1.0, 1.0, 0.1, 0.0);
        assert!((t - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((t - 0.9).abs() < 1e-8);
        assert!((scalar_step(1.0, 0.0, 0.1, 1.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adamw_step_rejects_zero_index() {
        let cfg = ModelConfig::new(5, 2);
        let mut w = Weights::zeros(&cfg);
        let g = Weights::zeros(&cfg);
        let mut m = AdamMoments::new(&cfg);
        assert!(adamw_step(&mut w, &g, &mut m, &TrainConfig::default(), 0).is_err());
    }

    #[test]
    fn saturation_detection() {
        assert_eq!(detect_saturation(&[0.5, 0.991, 0.98], 0.99), Some(2));
        assert_eq!(detect_saturation(&[0.5, 0.6], 0.99), None);
        assert_eq!(detect_saturation(&[1.0, 1.0], 0.99), Some(1));
        assert_eq!(detect_saturation(&[], 0.99), None);
    }

    #[test]
    fn plateau_detection() {
        let decreasing: Vec<f64> = (0..500).map(|i| 10.0 - i as f64 * 1e-3).collect();
        assert_eq!(detect_plateau(&decreasing, 1e-4, 100), None);
        assert_eq!(detect_plateau(&[2.0; 300], 1e-4, 100), Some(101));
        // Constant from epoch 6 onwards: plateau 100 epochs after that.
        let mut l: Vec<f64> = (0..5).map(|i| 5.0 - i as f64).collect();
        l.extend([1.0; 200]);
        assert_eq!(detect_plateau(&l, 1e-4, 100), Some(105));
        assert_eq!(detect_plateau(&decreasing, f64::INFINITY, 100), Some(101));
    }

    #[test]
    fn tiny_random_run_memorises() {
        let data = build_random_dataset(&RandomLabelSpec::new(11, 1, 3)).unwrap();
        let mcfg = ModelConfig::new(11, 16);
        let tcfg = TrainConfig {
            dropout_rate: 0.0,
            max_epochs: 50,
            stop_rule: StopRule::TrainSaturation,
            ..TrainConfig::default()
        };
        let rec = train_run(&data, &mcfg, &tcfg, 1).unwrap();
        assert_eq!(rec.termination, Termination::Saturated);
        let t = rec.events.t_sat.unwrap();
        assert!(t <= 10, "took {t} epochs");
        assert_eq!(rec.trace.last().unwrap().train_acc, 1.0);
        assert_eq!(rec.events, derive_events(&rec.trace, &rec.train));
    }

    #[test]
    fn runs_are_deterministic() {
        let data = build_modular_dataset(&TaskSpec::new(7, Operation::Div, 0.5, 0)).unwrap();
        let mcfg = ModelConfig::new(9, 8);
        let tcfg = TrainConfig { max_epochs: 5, batch_size: 8, ..TrainConfig::default() };
        let a = train_run(&data, &mcfg, &tcfg, 4).unwrap();
        let b = train_run(&data, &mcfg, &tcfg, 4).unwrap();
        assert_eq!(a, b);
        let c = train_run(&data, &mcfg, &tcfg, 5).unwrap();
        assert_ne!(a.trace, c.trace);
        assert!(a.trace.iter().all(|r| r.val_acc.is_some()));
        let epochs: Vec<u32> = a.trace.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn zero_budget_gives_empty_trace() {
        let data = build_random_dataset(&RandomLabelSpec::new(5, 4, 0)).unwrap();
        let tcfg = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
        let rec = train_run(&data, &ModelConfig::new(5, 4), &tcfg, 0).unwrap();
        assert!(rec.trace.is_empty());
        assert_eq!(rec.termination, Termination::Budget);
    }

    #[test]
    fn numeric_failure_keeps_partial_trace() {
        let data = build_random_dataset(&RandomLabelSpec::new(5, 16, 0)).unwrap();
        let tcfg = TrainConfig { lr: 1e300, weight_decay: 0.0, max_epochs: 20, ..TrainConfig::default() };
        let rec = train_run(&data, &ModelConfig::new(5, 4), &tcfg, 0).unwrap();
        assert_eq!(rec.termination, Termination::NumericFailure);
        assert!(rec.failure.as_deref().unwrap().contains("epoch"));
        assert!(rec.trace.len() < 20);
    }

    #[test]
    fn plateau_rule_stops_capacity_runs() {
        let data = build_random_dataset(&RandomLabelSpec::new(7, 8, 1)).unwrap();
        let tcfg = TrainConfig {
            dropout_rate: 0.0,
            plateau_patience: 5,
            plateau_delta: 10.0,
            max_epochs: 100,
            stop_rule: StopRule::Plateau,
            ..TrainConfig::default()
        };
        let rec = train_run(&data, &ModelConfig::new(7, 4), &tcfg, 2).unwrap();
        assert_eq!(rec.termination, Termination::Plateau);
        assert_eq!(rec.trace.len(), 6);
        let losses: Vec<f64> = rec.trace.iter().map(|r| r.train_loss).collect();
        assert_eq!(detect_plateau(&losses, 10.0, 5), Some(6));
    }

    #[test]
    fn best_loss_decreases_on_representable_data() {
        let data = build_random_dataset(&RandomLabelSpec::new(9, 12, 4)).unwrap();
        let tcfg = TrainConfig {
            dropout_rate: 0.0,
            weight_decay: 0.1,
            max_epochs: 120,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let rec = train_run(&data, &ModelConfig::new(9, 8), &tcfg, 0).unwrap();
        let mut best = f64::INFINITY;
        let mut last_improvement = 0;
        for r in &rec.trace {
            if r.train_loss < best {
                best = r.train_loss;
                last_improvement = r.epoch;
            }
            assert!(r.epoch - last_improvement < 50, "no progress over 50 epochs at {}", r.epoch);
        }
        assert!(best < rec.trace[0].train_loss);
    }
}

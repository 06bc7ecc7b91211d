//! The three sweeps (capacity, memorisation speed, grokking) and the
//! estimators built on them: capacity fit, exponential speed fit, generalisation
//! delays, onset and the speed-curve intersection.
//!
//! Sweeps are split into run enumeration (`*_specs`), execution
//! ([`execute_specs`]) and aggregation (`aggregate_*`), so every aggregate is
//! a pure function of completed [`RunRecord`]s.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{dataset_complexity, equivalent_random_size, Operation, RandomLabelSpec, TaskSpec};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::model::{param_count, ModelConfig};
use crate::training::{train_run, DataSource, RunRecord, StopRule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Capacity,
    Speed,
    Grok,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Capacity => "capacity",
            ExperimentKind::Speed => "speed",
            ExperimentKind::Grok => "grok",
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub kind: ExperimentKind,
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunSpec {
    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("run specs always serialise");
        hex::encode(Sha256::digest(&json))
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.model)
    }

    pub fn execute(&self) -> Result<RunRecord> {
        let data = self.data.build()?;
        let mut rec = train_run(&data, &self.model, &self.train, self.seed)?;
        rec.run_id = self.run_id();
        rec.data = Some(self.data);
        Ok(rec)
    }
}

/// Runs specs on up to `workers` threads. `on_done(index, result)` is called
/// on the calling thread as runs finish, in completion order.
pub fn execute_specs_with<F>(specs: &[RunSpec], workers: usize, mut on_done: F)
where
    F: FnMut(usize, Result<RunRecord>),
{
    let workers = workers.max(1).min(specs.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= specs.len() {
                    break;
                }
                if tx.send((i, specs[i].execute())).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, res) in rx {
            on_done(i, res);
        }
    });
}

/// Runs specs in parallel and returns results in spec order.
pub fn execute_specs(specs: &[RunSpec], workers: usize) -> Vec<Result<RunRecord>> {
    let mut out: Vec<Option<Result<RunRecord>>> = (0..specs.len()).map(|_| None).collect();
    execute_specs_with(specs, workers, |i, r| out[i] = Some(r));
    out.into_iter().map(|r| r.expect("every spec reports")).collect()
}

fn ok_records(results: Vec<Result<RunRecord>>) -> Result<Vec<RunRecord>> {
    results.into_iter().collect()
}

/// Geometric grid from `lo` to `hi` inclusive with `k` points, rounded.
pub fn geometric_grid(lo: usize, hi: usize, k: usize) -> Vec<usize> {
    if k <= 1 {
        return vec![lo];
    }
    let r = (hi as f64 / lo as f64).powf(1.0 / (k - 1) as f64);
    let mut g: Vec<usize> = (0..k).map(|i| (lo as f64 * r.powi(i as i32)).round() as usize).collect();
    g.dedup();
    g
}

// ---------------------------------------------------------------- capacity

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub n: usize,
    pub complexity_bits: f64,
    pub memorisation_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityCurve {
    pub dim: usize,
    pub params: usize,
    pub vocab_size: usize,
    pub points: Vec<CapacityPoint>,
    pub plateau_bits: f64,
    /// The grid never left the linear regime, so the plateau is a lower bound.
    pub censored: bool,
}

/// A point memorising at least this fraction of its bits is still linear.
pub const LINEAR_REGIME_FRACTION: f64 = 0.9;

impl CapacityCurve {
    pub fn from_points(dim: usize, params: usize, vocab_size: usize, mut points: Vec<CapacityPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InsufficientData(format!("capacity curve d={dim} has no points")));
        }
        points.sort_by_key(|p| p.n);
        let plateau_bits = points.iter().map(|p| p.memorisation_bits).fold(f64::NEG_INFINITY, f64::max);
        let last = points.last().expect("nonempty");
        let censored = points.len() < 2 || last.memorisation_bits >= LINEAR_REGIME_FRACTION * last.complexity_bits;
        Ok(CapacityCurve { dim, params, vocab_size, points, plateau_bits, censored })
    }
}

/// Dropout-free, plateau-stopped runs on random data for every `(d, n)`.
pub fn capacity_specs(
    dims: &[usize],
    n_grid: &[usize],
    base_model: &ModelConfig,
    tcfg: &TrainConfig,
    data_seed: u64,
    seed: u64,
) -> Result<Vec<RunSpec>> {
    if dims.is_empty() || n_grid.is_empty() {
        return Err(invalid_config("capacity sweep needs nonempty dims and n grids"));
    }
    let train = TrainConfig { dropout_rate: 0.0, stop_rule: StopRule::Plateau, ..*tcfg };
    let mut out = Vec::new();
    for &d in dims {
        let model = ModelConfig { width: d, dropout_rate: 0.0, ..*base_model };
        model.validate()?;
        for &n in n_grid {
            let data = RandomLabelSpec::new(base_model.vocab_size, n, data_seed);
            data.validate()?;
            out.push(RunSpec { kind: ExperimentKind::Capacity, data: DataSource::Random(data), model, train, seed });
        }
    }
    Ok(out)
}

/// One curve per width, from completed capacity runs. Runs that failed
/// numerically are left out of their curve.
pub fn aggregate_capacity(records: &[RunRecord]) -> Result<Vec<CapacityCurve>> {
    let mut by_dim: BTreeMap<(usize, usize), (usize, Vec<CapacityPoint>)> = BTreeMap::new();
    for r in records {
        let Some(DataSource::Random(spec)) = r.data else {
            return Err(invalid_input(format!("run {} is not a random-label run", r.run_id)));
        };
        let Some(m) = r.memorisation_bits else { continue };
        let entry = by_dim.entry((r.model.width, r.model.depth)).or_insert((r.param_count, Vec::new()));
        entry.1.push(CapacityPoint {
            n: spec.n,
            complexity_bits: spec.n as f64 * (spec.vocab_size as f64).log2(),
            memorisation_bits: m,
        });
    }
    let v = records.first().map(|r| r.model.vocab_size).unwrap_or(0);
    let mut curves: Vec<CapacityCurve> = by_dim
        .into_iter()
        .map(|((d, _), (p, pts))| CapacityCurve::from_points(d, p, v, pts))
        .collect::<Result<_>>()?;
    curves.sort_by_key(|c| c.params);
    Ok(curves)
}

pub fn run_capacity_sweep(
    dims: &[usize],
    n_grid: &[usize],
    base_model: &ModelConfig,
    tcfg: &TrainConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<CapacityCurve>> {
    let specs = capacity_specs(dims, n_grid, base_model, tcfg, seed, seed)?;
    aggregate_capacity(&ok_records(execute_specs(&specs, workers))?)
}

/// Simple least squares `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(format!("line fit needs >= 2 paired points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(invalid_input("line fit: constant abscissa"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(LineFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityFit {
    pub c_model: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `(P_k, plateau_k)` for the curves used.
    pub pairs: Vec<(usize, f64)>,
    /// Widths excluded because their plateau was censored.
    pub excluded_dims: Vec<usize>,
}

/// Least squares of plateau bits on parameter count over uncensored curves.
pub fn fit_capacity_line(curves: &[CapacityCurve]) -> Result<CapacityFit> {
    let used: Vec<&CapacityCurve> = curves.iter().filter(|c| !c.censored).collect();
    if used.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "capacity fit needs >= 3 uncensored curves, got {}",
            used.len()
        )));
    }
    let x: Vec<f64> = used.iter().map(|c| c.params as f64).collect();
    let y: Vec<f64> = used.iter().map(|c| c.plateau_bits).collect();
    let fit = fit_line(&x, &y)?;
    Ok(CapacityFit {
        c_model: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        pairs: used.iter().map(|c| (c.params, c.plateau_bits)).collect(),
        excluded_dims: curves.iter().filter(|c| c.censored).map(|c| c.dim).collect(),
    })
}

// ------------------------------------------------------------------- speed

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Mem,
    Gen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedPoint {
    pub dim: usize,
    pub params: usize,
    /// Dataset bits the point was measured on.
    pub complexity_bits: f64,
    /// `(seed, saturation epoch)`; `None` marks a seed censored at the budget.
    pub per_seed: Vec<(u64, Option<u32>)>,
    /// Mean over saturated seeds only.
    pub mean: Option<f64>,
    pub censored_seeds: usize,
    /// Capacity fraction, when a capacity constant was supplied.
    pub f: Option<f64>,
}

impl SpeedPoint {
    pub fn censored(&self) -> bool {
        self.mean.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedCurve {
    pub kind: CurveKind,
    pub points: Vec<SpeedPoint>,
}

impl SpeedCurve {
    /// Uncensored `(P, mean T)` pairs sorted by P.
    pub fn means(&self) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self.points.iter().filter_map(|p| p.mean.map(|m| (p.params, m))).collect();
        v.sort_by_key(|p| p.0);
        v
    }
}

/// Train-saturation runs on random labels with the modular task's bit count.
#[allow(clippy::too_many_arguments)]
pub fn speed_specs(
    task: &TaskSpec,
    dims: &[usize],
    seeds: &[u64],
    base_model: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<RunSpec>> {
    task.validate()?;
    if dims.is_empty() || seeds.is_empty() {
        return Err(invalid_config("speed sweep needs nonempty dims and seeds"));
    }
    let v = task.vocab_size();
    let k = dataset_complexity(task.prime, task.train_fraction, task.operation);
    let n = equivalent_random_size(k, v)?;
    let train = TrainConfig { stop_rule: StopRule::TrainSaturation, ..*tcfg };
    let mut out = Vec::new();
    for &d in dims {
        let model = ModelConfig { width: d, vocab_size: v, ..*base_model };
        model.validate()?;
        for &s in seeds {
            let data = DataSource::Random(RandomLabelSpec::new(v, n, s));
            out.push(RunSpec { kind: ExperimentKind::Speed, data, model, train, seed: s });
        }
    }
    Ok(out)
}

fn complexity_of(source: &DataSource) -> f64 {
    match source {
        DataSource::Random(r) => r.n as f64 * (r.vocab_size as f64).log2(),
        DataSource::Modular(t) => dataset_complexity(t.prime, t.train_fraction, t.operation),
    }
}

/// Groups runs by `(width, dataset bits)` and averages the saturation epoch
/// (`E_train` for memorisation curves, `T_gen` for generalisation curves).
pub fn aggregate_speed(records: &[RunRecord], kind: CurveKind, c_model: Option<f64>) -> Result<SpeedCurve> {
    let mut groups: BTreeMap<(usize, usize, u64), SpeedPoint> = BTreeMap::new();
    for r in records {
        let data = r.data.ok_or_else(|| invalid_input(format!("run {} has no data source", r.run_id)))?;
        let k = complexity_of(&data);
        let t = match kind {
            CurveKind::Mem => r.events.e_train,
            CurveKind::Gen => r.events.t_gen,
        };
        let pt = groups.entry((r.param_count, r.model.width, k.to_bits())).or_insert_with(|| SpeedPoint {
            dim: r.model.width,
            params: r.param_count,
            complexity_bits: k,
            per_seed: Vec::new(),
            mean: None,
            censored_seeds: 0,
            f: c_model.map(|c| k / (c * r.param_count as f64)),
        });
        pt.per_seed.push((r.seed, t));
    }
    let mut points: Vec<SpeedPoint> = groups.into_values().collect();
    for p in &mut points {
        p.per_seed.sort();
        let done: Vec<f64> = p.per_seed.iter().filter_map(|(_, t)| t.map(f64::from)).collect();
        p.censored_seeds = p.per_seed.len() - done.len();
        p.mean = (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
    }
    Ok(SpeedCurve { kind, points })
}

pub fn run_speed_sweep(
    task: &TaskSpec,
    dims: &[usize],
    seeds: &[u64],
    base_model: &ModelConfig,
    tcfg: &TrainConfig,
    c_model: f64,
    workers: usize,
) -> Result<SpeedCurve> {
    let specs = speed_specs(task, dims, seeds, base_model, tcfg)?;
    aggregate_speed(&ok_records(execute_specs(&specs, workers))?, CurveKind::Mem, Some(c_model))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub n_points: usize,
}

/// Largest capacity fraction admitted into the exponential fit.
pub const EXP_FIT_MAX_F: f64 = 0.25;

/// `T ≈ b e^{a f}` by least squares of `ln T` on `f`, over `0 <= f <= 0.25`.
pub fn fit_speed_exponential(points: &[(f64, f64)]) -> Result<ExponentialFit> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(f, t)| (0.0..=EXP_FIT_MAX_F).contains(&f) && t > 0.0)
        .collect();
    if used.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "exponential fit needs >= 3 points with f in [0, {EXP_FIT_MAX_F}], got {}",
            used.len()
        )));
    }
    let x: Vec<f64> = used.iter().map(|p| p.0).collect();
    let y: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let fit = fit_line(&x, &y)?;
    Ok(ExponentialFit { a: fit.slope, b: fit.intercept.exp(), r2: fit.r2, n_points: used.len() })
}

// -------------------------------------------------------------------- grok

/// Per-seed generalisation delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delay {
    /// `max(0, E_val - E_train)`.
    Measured(u32),
    /// Train saturated but validation never did; the delay exceeds the rest
    /// of the budget.
    AtLeast(u32),
    /// Train accuracy never saturated.
    Undefined,
}

impl Delay {
    pub fn lower_bound(self) -> Option<u32> {
        match self {
            Delay::Measured(v) | Delay::AtLeast(v) => Some(v),
            Delay::Undefined => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self.lower_bound().is_some_and(|v| v > 0)
    }
}

/// Delay of one run given its event epochs and epoch budget.
pub fn generalisation_delay(e_train: Option<u32>, e_val: Option<u32>, max_epochs: u32) -> Delay {
    match (e_train, e_val) {
        (None, _) => Delay::Undefined,
        (Some(t), Some(v)) => Delay::Measured(v.saturating_sub(t)),
        (Some(t), None) => Delay::AtLeast(max_epochs + 1 - t),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub e_train: Option<u32>,
    pub e_val: Option<u32>,
    pub t_gen: Option<u32>,
    pub delay: Delay,
    pub final_val_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// No seed saturated train accuracy.
    UnderCapacity,
    /// Seed-minimum delay is zero.
    Immediate,
    /// Seed-minimum delay is positive.
    Grokking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrokPoint {
    pub dim: usize,
    pub params: usize,
    pub seeds: Vec<SeedOutcome>,
    /// Seed minimum over seeds whose delay is defined.
    pub delta_e: Option<Delay>,
    pub regime: Regime,
    /// Every seed reached the generalisation threshold.
    pub all_generalised: bool,
}

/// Seed minimum of the defined delays. A censored delay only wins when its
/// lower bound is below every measured delay.
pub fn seed_minimum(delays: &[Delay]) -> Option<Delay> {
    delays
        .iter()
        .copied()
        .filter(|d| d.lower_bound().is_some())
        .min_by_key(|d| (d.lower_bound(), matches!(d, Delay::AtLeast(_))))
}

/// Modular-task runs stopped at generalisation (or the budget).
pub fn grok_specs(
    task: &TaskSpec,
    dims: &[usize],
    seeds: &[u64],
    base_model: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<RunSpec>> {
    task.validate()?;
    if dims.is_empty() || seeds.is_empty() {
        return Err(invalid_config("grok sweep needs nonempty dims and seeds"));
    }
    let train = TrainConfig { stop_rule: StopRule::Generalisation, ..*tcfg };
    let mut out = Vec::new();
    for &d in dims {
        let model = ModelConfig { width: d, vocab_size: task.vocab_size(), ..*base_model };
        model.validate()?;
        for &s in seeds {
            let data = DataSource::Modular(TaskSpec { split_seed: s, ..*task });
            out.push(RunSpec { kind: ExperimentKind::Grok, data, model, train, seed: s });
        }
    }
    Ok(out)
}

/// Per-width grok points (sorted by P) and the generalisation-speed curve.
pub fn aggregate_grok(records: &[RunRecord], c_model: Option<f64>) -> Result<(Vec<GrokPoint>, SpeedCurve)> {
    let mut by: BTreeMap<(usize, usize), Vec<SeedOutcome>> = BTreeMap::new();
    for r in records {
        let ev = r.events;
        by.entry((r.param_count, r.model.width)).or_default().push(SeedOutcome {
            seed: r.seed,
            e_train: ev.e_train,
            e_val: ev.e_val,
            t_gen: ev.t_gen,
            delay: generalisation_delay(ev.e_train, ev.e_val, r.train.max_epochs),
            final_val_acc: r.trace.last().and_then(|t| t.val_acc),
        });
    }
    let points = by
        .into_iter()
        .map(|((params, dim), mut seeds)| {
            seeds.sort_by_key(|s| s.seed);
            let delays: Vec<Delay> = seeds.iter().map(|s| s.delay).collect();
            let delta_e = seed_minimum(&delays);
            let regime = match delta_e {
                None => Regime::UnderCapacity,
                Some(d) if d.is_positive() => Regime::Grokking,
                Some(_) => Regime::Immediate,
            };
            let all_generalised = seeds.iter().all(|s| s.t_gen.is_some());
            GrokPoint { dim, params, seeds, delta_e, regime, all_generalised }
        })
        .collect();
    Ok((points, aggregate_speed(records, CurveKind::Gen, c_model)?))
}

pub fn run_grok_sweep(
    task: &TaskSpec,
    dims: &[usize],
    seeds: &[u64],
    base_model: &ModelConfig,
    tcfg: &TrainConfig,
    workers: usize,
) -> Result<(Vec<GrokPoint>, SpeedCurve)> {
    let specs = grok_specs(task, dims, seeds, base_model, tcfg)?;
    aggregate_grok(&ok_records(execute_specs(&specs, workers))?, None)
}

/// Smallest measured P from which every larger measured P has a positive
/// delay. `delays` must be sorted by strictly increasing P.
pub fn compute_onset(delays: &[(usize, Delay)]) -> Result<Option<usize>> {
    if delays.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(invalid_input("onset: P values must be distinct and sorted"));
    }
    let mut onset = None;
    for &(p, d) in delays.iter().rev() {
        if d.is_positive() {
            onset = Some(p);
        } else {
            break;
        }
    }
    Ok(onset)
}

/// Onset over the grok points whose seed-minimum delay is defined.
pub fn onset_from_points(points: &[GrokPoint]) -> Result<Option<usize>> {
    let mut delays: Vec<(usize, Delay)> = points.iter().filter_map(|p| p.delta_e.map(|d| (p.params, d))).collect();
    delays.sort_by_key(|d| d.0);
    compute_onset(&delays)
}

/// Parameter count where `ln T_gen - ln T_mem` first turns non-negative for
/// good, interpolated in `log P`; falls back to the first sign change.
pub fn find_intersection(mem: &SpeedCurve, gen: &SpeedCurve) -> Result<Option<f64>> {
    let mem_m: BTreeMap<usize, f64> = mem.means().into_iter().collect();
    let common: Vec<(usize, f64)> = gen
        .means()
        .into_iter()
        .filter_map(|(p, tg)| mem_m.get(&p).map(|&tm| (p, tg.ln() - tm.ln())))
        .collect();
    if common.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "intersection needs >= 2 common uncensored grid points, got {}",
            common.len()
        )));
    }
    Ok(crossing_from_differences(&common))
}

/// Zero of `D` over sorted `(P, D)` pairs under the persistence rule.
pub fn crossing_from_differences(points: &[(usize, f64)]) -> Option<f64> {
    let interp = |i: usize| -> f64 {
        let (p0, d0) = points[i];
        let (p1, d1) = points[i + 1];
        if d1 == 0.0 {
            return p1 as f64;
        }
        if d0 == 0.0 {
            return p0 as f64;
        }
        let (l0, l1) = ((p0 as f64).log10(), (p1 as f64).log10());
        10f64.powf(l0 + (-d0 / (d1 - d0)) * (l1 - l0))
    };
    let n = points.len();
    for i in 0..n - 1 {
        if points[i].1 < 0.0 && points[i + 1].1 >= 0.0 && points[i + 1..].iter().all(|p| p.1 >= 0.0) {
            return Some(interp(i));
        }
    }
    (0..n - 1).find(|&i| (points[i].1 < 0.0) != (points[i + 1].1 < 0.0)).map(interp)
}

/// Parameter count at which the training set first fits: `K / C_model`.
pub fn predicted_threshold(complexity_bits: f64, c_model: f64) -> Result<f64> {
    if !(c_model > 0.0) {
        return Err(invalid_input(format!("C_model must be positive, got {c_model}")));
    }
    Ok(complexity_bits / c_model)
}

/// Width from `candidates` whose parameter count is closest to `target`;
/// ties go to the smaller width.
pub fn dim_for_param_target(target: usize, base: &ModelConfig, candidates: &[usize]) -> Result<usize> {
    let mut best: Option<(usize, usize)> = None;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    for d in sorted {
        let p = param_count(&ModelConfig { width: d, ..*base });
        let gap = p.abs_diff(target);
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some((d, gap));
        }
    }
    best.map(|b| b.0).ok_or_else(|| invalid_config("dim_for_param_target: empty candidate grid"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetEstimate {
    pub prime: u64,
    pub operation: Operation,
    pub train_fraction: f64,
    pub p_onset: Option<usize>,
    /// `(P, seed-minimum delay)` for every width with a defined delay.
    pub delays: Vec<(usize, Delay)>,
    pub p_cross: Option<f64>,
    /// `K / C_model`, when a capacity constant is known.
    pub p_mem: Option<f64>,
}

/// Onset plus crossing for one task. `mem` may be absent when no speed runs
/// exist; the crossing is then absent too.
pub fn estimate_onset(
    task: &TaskSpec,
    points: &[GrokPoint],
    gen: &SpeedCurve,
    mem: Option<&SpeedCurve>,
    c_model: Option<f64>,
) -> Result<OnsetEstimate> {
    let mut delays: Vec<(usize, Delay)> = points.iter().filter_map(|p| p.delta_e.map(|d| (p.params, d))).collect();
    delays.sort_by_key(|d| d.0);
    let p_cross = match mem {
        Some(m) => match find_intersection(m, gen) {
            Ok(c) => c,
            Err(Error::InsufficientData(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let k = dataset_complexity(task.prime, task.train_fraction, task.operation);
    Ok(OnsetEstimate {
        prime: task.prime,
        operation: task.operation,
        train_fraction: task.train_fraction,
        p_onset: compute_onset(&delays)?,
        delays,
        p_cross,
        p_mem: c_model.map(|c| predicted_threshold(k, c)).transpose()?,
    })
}

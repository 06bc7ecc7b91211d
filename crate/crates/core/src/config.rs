//! YAML job files: one experiment kind with its grids, swept axes and
//! config overrides.
//!
//! ```yaml
//! kind: grok
//! primes: [23]
//! dims: [4, 8, 16, 32]
//! seed_count: 3
//! train: { max_epochs: 5000 }
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datasets::{is_prime, Operation, TaskSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipelines::{
    capacity_specs, dim_for_param_target, grok_specs, speed_specs, ExperimentKind, RunSpec,
};
use crate::training::{StopRule, TrainConfig};

/// Where a speed job gets its capacity constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CModelSource {
    Value(f64),
    /// Fit from the capacity runs stored in the same registry.
    Named(CModelKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CModelKeyword {
    Registry,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub init_scale: Option<f64>,
    pub rope_base: Option<f64>,
    pub norm_eps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lr: Option<f64>,
    pub betas: Option<(f64, f64)>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<u32>,
    pub dropout_rate: Option<f64>,
    pub train_sat_threshold: Option<f64>,
    pub val_sat_threshold: Option<f64>,
    pub gen_sat_threshold: Option<f64>,
    pub plateau_delta: Option<f64>,
    pub plateau_patience: Option<u32>,
}

/// Hyperparameter axes; each listed value multiplies the grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub weight_decay: Option<Vec<f64>>,
    pub lr: Option<Vec<f64>>,
    pub init_scale: Option<Vec<f64>>,
    pub depth: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricGrid {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub primes: Vec<u64>,
    #[serde(default = "default_operations")]
    pub operations: Vec<Operation>,
    #[serde(default = "default_train_fractions")]
    pub train_fractions: Vec<f64>,
    pub dims: Option<Vec<usize>>,
    /// Alternative to `dims`: widths chosen per cell to hit these counts.
    pub param_targets: Option<Vec<usize>>,
    pub dim_candidates: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub seed_count: Option<usize>,
    #[serde(default = "default_seed_base")]
    pub seed_base: u64,
    /// Capacity jobs: dataset sizes, listed or geometric.
    pub n_grid: Option<Vec<usize>>,
    pub n_geometric: Option<GeometricGrid>,
    /// Capacity jobs: vocabulary size; defaults to `primes[0] + 2`.
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub data_seed: u64,
    pub c_model: Option<CModelSource>,
    /// Widths above this are left out of the grid.
    pub max_dim: Option<usize>,
    #[serde(default)]
    pub axes: SweepAxes,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainOverrides,
    pub output: Option<PathBuf>,
}

fn default_operations() -> Vec<Operation> {
    vec![Operation::Div]
}

fn default_train_fractions() -> Vec<f64> {
    vec![0.5]
}

fn default_seed_base() -> u64 {
    42
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Parses and validates a job file.
pub fn load_job(text: &str) -> Result<JobSpec> {
    let job: JobSpec = serde_yaml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    job.validate()?;
    Ok(job)
}

/// One combination of swept hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisPoint {
    pub weight_decay: f64,
    pub lr: f64,
    pub init_scale: f64,
    pub depth: usize,
}

/// A task plus axis setting: the unit that gets one onset estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub task: TaskSpec,
    pub axes: AxisPoint,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "p{}_{}_a{}_wd{}_lr{}_g{}_L{}",
            self.task.prime,
            self.task.operation,
            self.task.train_fraction,
            self.axes.weight_decay,
            self.axes.lr,
            self.axes.init_scale,
            self.axes.depth
        )
    }
}

impl JobSpec {
    pub fn validate(&self) -> Result<()> {
        let nonempty = |name: &str, empty: bool| if empty { Err(cfg_err(format!("{name} must be nonempty"))) } else { Ok(()) };
        match (&self.dims, &self.param_targets) {
            (Some(d), None) => nonempty("dims", d.is_empty())?,
            (None, Some(t)) => {
                nonempty("param_targets", t.is_empty())?;
                nonempty("dim_candidates", self.dim_candidates.as_ref().is_none_or(Vec::is_empty))?;
            }
            (Some(_), Some(_)) => return Err(cfg_err("give either dims or param_targets, not both")),
            (None, None) => return Err(cfg_err("one of dims or param_targets is required")),
        }
        match (&self.seeds, self.seed_count) {
            (Some(s), None) => nonempty("seeds", s.is_empty())?,
            (None, Some(c)) => nonempty("seed_count", c == 0)?,
            (Some(_), Some(_)) => return Err(cfg_err("give either seeds or seed_count, not both")),
            (None, None) => return Err(cfg_err("one of seeds or seed_count is required")),
        }
        nonempty("operations", self.operations.is_empty())?;
        nonempty("train_fractions", self.train_fractions.is_empty())?;
        for &a in &self.train_fractions {
            if !(a > 0.0 && a < 1.0) {
                return Err(cfg_err(format!("train_fraction {a} outside (0, 1)")));
            }
        }
        for &p in &self.primes {
            if p < 5 || !is_prime(p) {
                return Err(cfg_err(format!("{p} is not a prime >= 5")));
            }
        }
        let axes = &self.axes;
        for (name, empty) in [
            ("axes.weight_decay", axes.weight_decay.as_ref().is_some_and(Vec::is_empty)),
            ("axes.lr", axes.lr.as_ref().is_some_and(Vec::is_empty)),
            ("axes.init_scale", axes.init_scale.as_ref().is_some_and(Vec::is_empty)),
            ("axes.depth", axes.depth.as_ref().is_some_and(Vec::is_empty)),
        ] {
            nonempty(name, empty)?;
        }
        match self.kind {
            ExperimentKind::Capacity => {
                match (&self.n_grid, &self.n_geometric) {
                    (Some(g), None) => nonempty("n_grid", g.is_empty())?,
                    (None, Some(g)) => {
                        if g.count == 0 || g.lo == 0 || g.hi < g.lo {
                            return Err(cfg_err("n_geometric needs 0 < lo <= hi and count >= 1"));
                        }
                    }
                    _ => return Err(cfg_err("capacity jobs need exactly one of n_grid or n_geometric")),
                }
                if self.vocab_size.is_none() && self.primes.is_empty() {
                    return Err(cfg_err("capacity jobs need vocab_size or primes"));
                }
            }
            ExperimentKind::Speed => {
                nonempty("primes", self.primes.is_empty())?;
                match self.c_model {
                    None => return Err(cfg_err("speed jobs need a c_model source (a number or `registry`)")),
                    Some(CModelSource::Value(c)) if !(c > 0.0) => {
                        return Err(cfg_err(format!("c_model must be positive, got {c}")))
                    }
                    _ => {}
                }
            }
            ExperimentKind::Grok => nonempty("primes", self.primes.is_empty())?,
        }
        self.train_config().validate()?;
        Ok(())
    }

    /// Defaults overlaid with the `train:` section.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let d = TrainConfig::default();
        TrainConfig {
            lr: t.lr.unwrap_or(d.lr),
            betas: t.betas.unwrap_or(d.betas),
            eps: t.eps.unwrap_or(d.eps),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            max_epochs: t.max_epochs.unwrap_or(d.max_epochs),
            dropout_rate: if self.kind == ExperimentKind::Capacity {
                0.0
            } else {
                t.dropout_rate.unwrap_or(d.dropout_rate)
            },
            train_sat_threshold: t.train_sat_threshold.unwrap_or(d.train_sat_threshold),
            val_sat_threshold: t.val_sat_threshold.unwrap_or(d.val_sat_threshold),
            gen_sat_threshold: t.gen_sat_threshold.unwrap_or(d.gen_sat_threshold),
            plateau_delta: t.plateau_delta.unwrap_or(d.plateau_delta),
            plateau_patience: t.plateau_patience.unwrap_or(d.plateau_patience),
            shuffle_seed: 0,
            stop_rule: match self.kind {
                ExperimentKind::Capacity => StopRule::Plateau,
                ExperimentKind::Speed => StopRule::TrainSaturation,
                ExperimentKind::Grok => StopRule::Generalisation,
            },
        }
    }

    /// Model defaults for vocabulary `v`, overlaid with the `model:` section.
    pub fn model_config(&self, v: usize) -> ModelConfig {
        let m = &self.model;
        let d = ModelConfig::new(v, 1);
        ModelConfig {
            depth: m.depth.unwrap_or(d.depth),
            heads: m.heads.unwrap_or(d.heads),
            ffn_mult: m.ffn_mult.unwrap_or(d.ffn_mult),
            init_scale: m.init_scale.unwrap_or(d.init_scale),
            rope_base: m.rope_base.unwrap_or(d.rope_base),
            norm_eps: m.norm_eps.unwrap_or(d.norm_eps),
            dropout_rate: self.train_config().dropout_rate,
            ..d
        }
    }

    /// Explicit seeds, or `seed_count` consecutive seeds from `seed_base`.
    pub fn seed_list(&self) -> Vec<u64> {
        match (&self.seeds, self.seed_count) {
            (Some(s), _) => s.clone(),
            (None, Some(c)) => (0..c as u64).map(|i| self.seed_base + i).collect(),
            (None, None) => Vec::new(),
        }
    }

    pub fn n_values(&self) -> Vec<usize> {
        match (&self.n_grid, &self.n_geometric) {
            (Some(g), _) => g.clone(),
            (None, Some(g)) => crate::pipelines::geometric_grid(g.lo, g.hi, g.count),
            _ => Vec::new(),
        }
    }

    pub fn axis_points(&self) -> Vec<AxisPoint> {
        let base_t = self.train_config();
        let base_m = self.model_config(5);
        let wd = self.axes.weight_decay.clone().unwrap_or(vec![base_t.weight_decay]);
        let lr = self.axes.lr.clone().unwrap_or(vec![base_t.lr]);
        let gs = self.axes.init_scale.clone().unwrap_or(vec![base_m.init_scale]);
        let ds = self.axes.depth.clone().unwrap_or(vec![base_m.depth]);
        let mut out = Vec::new();
        for &weight_decay in &wd {
            for &lr in &lr {
                for &init_scale in &gs {
                    for &depth in &ds {
                        out.push(AxisPoint { weight_decay, lr, init_scale, depth });
                    }
                }
            }
        }
        out
    }

    /// Names of the axes that take more than one value.
    pub fn swept_axes(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        let many = |o: &Option<Vec<f64>>| o.as_ref().is_some_and(|v| v.len() > 1);
        if many(&self.axes.weight_decay) {
            v.push("weight_decay");
        }
        if many(&self.axes.lr) {
            v.push("lr");
        }
        if many(&self.axes.init_scale) {
            v.push("init_scale");
        }
        if self.axes.depth.as_ref().is_some_and(|d| d.len() > 1) {
            v.push("depth");
        }
        if self.primes.len() > 1 {
            v.push("prime");
        }
        if self.operations.len() > 1 {
            v.push("operation");
        }
        if self.train_fractions.len() > 1 {
            v.push("train_fraction");
        }
        v
    }

    /// Every task and axis combination (tasks only exist for modular jobs).
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &p in &self.primes {
            for &op in &self.operations {
                for &alpha in &self.train_fractions {
                    for axes in self.axis_points() {
                        out.push(Cell { task: TaskSpec::new(p, op, alpha, 0), axes });
                    }
                }
            }
        }
        out
    }

    fn widths(&self, base: &ModelConfig, max_dim: Option<usize>) -> Result<Vec<usize>> {
        let mut dims = match (&self.dims, &self.param_targets) {
            (Some(d), _) => d.clone(),
            (None, Some(targets)) => {
                let cands = self.dim_candidates.clone().unwrap_or_default();
                let mut v = targets
                    .iter()
                    .map(|&t| dim_for_param_target(t, base, &cands))
                    .collect::<Result<Vec<_>>>()?;
                v.dedup();
                v
            }
            (None, None) => Vec::new(),
        };
        if let Some(m) = max_dim.or(self.max_dim) {
            dims.retain(|&d| d <= m);
        }
        if dims.is_empty() {
            return Err(cfg_err("no widths left after applying max_dim"));
        }
        Ok(dims)
    }

    fn cell_configs(&self, v: usize, axes: &AxisPoint) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig { depth: axes.depth, init_scale: axes.init_scale, ..self.model_config(v) };
        let train = TrainConfig { weight_decay: axes.weight_decay, lr: axes.lr, ..self.train_config() };
        (model, train)
    }

    /// The grid's runs for `kind`, which is normally `self.kind`; a grok job
    /// also yields its matched speed runs.
    pub fn expand_as(&self, kind: ExperimentKind, max_dim: Option<usize>) -> Result<Vec<RunSpec>> {
        let seeds = self.seed_list();
        let mut out = Vec::new();
        match kind {
            ExperimentKind::Capacity => {
                let v = self.vocab_size.unwrap_or_else(|| self.primes[0] as usize + 2);
                for axes in self.axis_points() {
                    let (model, train) = self.cell_configs(v, &axes);
                    let dims = self.widths(&model, max_dim)?;
                    for &s in &seeds {
                        out.extend(capacity_specs(&dims, &self.n_values(), &model, &train, self.data_seed, s)?);
                    }
                }
            }
            ExperimentKind::Speed | ExperimentKind::Grok => {
                for cell in self.cells() {
                    out.extend(self.cell_specs(kind, &cell, max_dim)?);
                }
            }
        }
        Ok(out)
    }

    /// Speed or grok runs for one cell.
    pub fn cell_specs(&self, kind: ExperimentKind, cell: &Cell, max_dim: Option<usize>) -> Result<Vec<RunSpec>> {
        let seeds = self.seed_list();
        let (model, mut train) = self.cell_configs(cell.task.vocab_size(), &cell.axes);
        let dims = self.widths(&model, max_dim)?;
        match kind {
            ExperimentKind::Speed => {
                train.stop_rule = StopRule::TrainSaturation;
                speed_specs(&cell.task, &dims, &seeds, &model, &train)
            }
            ExperimentKind::Grok => grok_specs(&cell.task, &dims, &seeds, &model, &train),
            ExperimentKind::Capacity => Err(cfg_err("capacity jobs have no task cells")),
        }
    }

    pub fn expand(&self, max_dim: Option<usize>) -> Result<Vec<RunSpec>> {
        self.expand_as(self.kind, max_dim)
    }

    /// The speed job matched to this grok job: same tasks, axes, widths
    /// and seeds.
    pub fn matched_speed_job(&self) -> JobSpec {
        JobSpec { kind: ExperimentKind::Speed, c_model: self.c_model.or(Some(CModelSource::Named(CModelKeyword::Registry))), ..self.clone() }
    }

    /// Applies a `--seed-base` override.
    pub fn with_seed_base(mut self, base: u64) -> Result<Self> {
        if self.seeds.is_some() {
            return Err(cfg_err("--seed-base needs a seed_count job, not an explicit seeds list"));
        }
        self.seed_base = base;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_GROK: &str = "kind: grok\nprimes: [7]\ndims: [4, 6]\nseeds: [1, 2, 3]\n";

    #[test]
    fn minimal_grok_job_gets_defaults() {
        let job = load_job(MINIMAL_GROK).unwrap();
        let t = job.train_config();
        assert_eq!((t.lr, t.weight_decay, t.dropout_rate, t.batch_size, t.max_epochs), (1e-3, 1.0, 0.2, 512, 5000));
        assert_eq!(t.stop_rule, StopRule::Generalisation);
        assert_eq!(job.operations, vec![Operation::Div]);
        let specs = job.expand(None).unwrap();
        assert_eq!(specs.len(), 6);
        assert!(specs.iter().all(|s| s.model.vocab_size == 9 && s.model.depth == 2));
    }

    #[test]
    fn schema_errors_name_the_problem() {
        let err = load_job("kind: grok\nprimes: [7]\ndims: []\nseeds: [1]\n").unwrap_err();
        assert!(err.to_string().contains("dims"), "{err}");
        let err = load_job(&format!("{MINIMAL_GROK}train:\n  dropoutt: 0.1\n")).unwrap_err();
        assert!(err.to_string().contains("dropoutt"), "{err}");
        let err = load_job("kind: grok\nprimes: [7]\ndims: [4]\nseeds: [1]\nbogus: 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line"), "{msg}");
        assert!(load_job("kind: speed\nprimes: [7]\ndims: [4]\nseeds: [1]\n").is_err());
        assert!(load_job("kind: grok\nprimes: [8]\ndims: [4]\nseeds: [1]\n").is_err());
    }

    #[test]
    fn speed_jobs_accept_both_c_model_sources() {
        let base = "kind: speed\nprimes: [7]\ndims: [4]\nseed_count: 2\n";
        let a = load_job(&format!("{base}c_model: 2.16\n")).unwrap();
        assert_eq!(a.c_model, Some(CModelSource::Value(2.16)));
        let b = load_job(&format!("{base}c_model: registry\n")).unwrap();
        assert_eq!(b.c_model, Some(CModelSource::Named(CModelKeyword::Registry)));
        assert_eq!(b.seed_list(), vec![42, 43]);
        assert_eq!(b.clone().with_seed_base(7).unwrap().seed_list(), vec![7, 8]);
    }

    #[test]
    fn grids_multiply() {
        let job = load_job(
            "kind: grok\nprimes: [7, 11]\ndims: [4, 6, 8]\nseeds: [1, 2]\naxes:\n  weight_decay: [0.5, 1.0]\n",
        )
        .unwrap();
        assert_eq!(job.expand(None).unwrap().len(), 2 * 3 * 2 * 2);
        assert_eq!(job.expand(Some(6)).unwrap().len(), 2 * 2 * 2 * 2);
        assert_eq!(job.swept_axes(), vec!["weight_decay", "prime"]);
        assert_eq!(job.matched_speed_job().expand(None).unwrap().len(), 24);
    }

    #[test]
    fn capacity_jobs() {
        let job = load_job("kind: capacity\nvocab_size: 25\ndims: [8, 10]\nseeds: [42]\nn_geometric: {lo: 50, hi: 2000, count: 5}\n")
            .unwrap();
        let specs = job.expand(None).unwrap();
        assert_eq!(specs.len(), 10);
        assert!(specs.iter().all(|s| s.train.dropout_rate == 0.0 && s.train.stop_rule == StopRule::Plateau));
        assert!(load_job("kind: capacity\nvocab_size: 25\ndims: [8]\nseeds: [42]\n").is_err());
    }

    #[test]
    fn param_targets_choose_widths() {
        let job = load_job(
            "kind: grok\nprimes: [97]\nparam_targets: [5230]\ndim_candidates: [8, 10, 12]\nseeds: [1]\n",
        )
        .unwrap();
        assert_eq!(job.expand(None).unwrap()[0].model.width, 10);
    }
}

//! CSV and SVG emission for sweep reports.

/// Decimal form with 17 significant digits; parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Serialises `f64` fields that may hold `inf` or `NaN` sentinels; JSON has
/// no literal for them, so non-finite values travel as strings.
pub mod serde_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{CModelSource, Cell, JobSpec};
use crate::datasets::dataset_complexity;
use crate::error::Result;
use crate::pipelines::{
    aggregate_capacity, aggregate_grok, aggregate_speed, estimate_onset, fit_capacity_line, fit_speed_exponential,
    CapacityCurve, CapacityFit, CurveKind, Delay, ExperimentKind, ExponentialFit, GrokPoint, OnsetEstimate, Regime,
    RunSpec, SpeedCurve,
};
use crate::registry::{describe, Registry};
use crate::stats::{Covariate, OnsetRow, OnsetTable, TestReport};
use crate::svg::{Mark, Plot, Series};

/// Text used in CSV cells and notes for a quantity that does not exist.
pub const ABSENT: &str = "absent";
pub const ONSET_ABSENT_NOTE: &str = "onset absent in range";

fn opt_cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| ABSENT.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Which of a job's runs the registry could supply.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Coverage {
    pub total: usize,
    /// Human labels of runs without a done record.
    pub missing: Vec<String>,
}

impl Coverage {
    fn of(total: usize, missing: &[RunSpec]) -> Self {
        Coverage { total, missing: missing.iter().map(|s| format!("{} {}", s.kind.as_str(), describe(s))).collect() }
    }

    fn merge(&mut self, other: Coverage) {
        self.total += other.total;
        self.missing.extend(other.missing);
    }

    pub fn complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn summary(&self) -> String {
        format!("{} out of {} runs missing", self.missing.len(), self.total)
    }

    fn write(&self, out: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        if self.complete() {
            return Ok(());
        }
        let path = out.join("missing.txt");
        let mut text = self.summary();
        text.push('\n');
        for m in &self.missing {
            text.push_str(m);
            text.push('\n');
        }
        fs::write(&path, text)?;
        files.push(path);
        Ok(())
    }
}

fn collect(registry: &Registry, specs: &[RunSpec]) -> Result<(Vec<crate::training::RunRecord>, Coverage)> {
    let (found, missing) = registry.collect(specs)?;
    let total = found.len() + missing.len();
    Ok((found, Coverage::of(total, &missing)))
}

// ---------------------------------------------------------------- capacity

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityReport {
    pub curves: Vec<CapacityCurve>,
    pub fit: Option<CapacityFit>,
    pub fit_error: Option<String>,
    pub coverage: Coverage,
}

pub fn capacity_report(registry: &Registry, job: &JobSpec, max_dim: Option<usize>) -> Result<CapacityReport> {
    let (records, coverage) = collect(registry, &job.expand_as(ExperimentKind::Capacity, max_dim)?)?;
    let curves = if records.is_empty() { Vec::new() } else { aggregate_capacity(&records)? };
    let (fit, fit_error) = match fit_capacity_line(&curves) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(CapacityReport { curves, fit, fit_error, coverage })
}

impl CapacityReport {
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out)?;
        let mut files = Vec::new();
        let mut rows = Vec::new();
        for c in &self.curves {
            for p in &c.points {
                rows.push(vec![
                    c.dim.to_string(),
                    c.params.to_string(),
                    p.n.to_string(),
                    fmt_f64(p.complexity_bits),
                    fmt_f64(p.memorisation_bits),
                ]);
            }
        }
        let path = out.join("capacity_points.csv");
        write_csv(&path, &["dim", "params", "n", "complexity_bits", "memorisation_bits"], &rows)?;
        files.push(path);

        let rows: Vec<Vec<String>> = self
            .curves
            .iter()
            .map(|c| {
                let pred = self.fit.as_ref().map(|f| f.intercept + f.c_model * c.params as f64);
                vec![c.dim.to_string(), c.params.to_string(), fmt_f64(c.plateau_bits), c.censored.to_string(), opt_cell(pred)]
            })
            .collect();
        let path = out.join("capacity_plateaus.csv");
        write_csv(&path, &["dim", "params", "plateau_bits", "censored", "fit_bits"], &rows)?;
        files.push(path);

        let path = out.join("capacity_fit.json");
        write_json(&path, &self.fit)?;
        files.push(path);

        let mut series: Vec<Series> = self
            .curves
            .iter()
            .map(|c| {
                let pts = c.points.iter().map(|p| (p.n as f64, p.memorisation_bits)).collect();
                Series::new(format!("d={} (P={})", c.dim, c.params), pts, Mark::Line)
            })
            .collect();
        if let Some(c) = self.curves.first() {
            let ident = c.points.iter().map(|p| (p.n as f64, p.complexity_bits)).collect();
            series.push(Series::new("n log2 V", ident, Mark::Dashed));
        }
        let plot = Plot {
            title: "Memorised bits vs dataset size".into(),
            x_label: "n (examples)".into(),
            y_label: "M_T (bits)".into(),
            log_x: true,
            series,
            notes: self.coverage_note(),
            ..Default::default()
        };
        let path = out.join("capacity_curves.svg");
        fs::write(&path, plot.render())?;
        files.push(path);

        let scatter: Vec<(f64, f64)> = self.curves.iter().map(|c| (c.params as f64, c.plateau_bits)).collect();
        let mut series = vec![Series::new("plateau", scatter, Mark::Scatter)];
        let mut notes = self.coverage_note();
        match &self.fit {
            Some(f) => {
                let (lo, hi) = self.curves.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| {
                    (a.min(c.params as f64), b.max(c.params as f64))
                });
                series.push(Series::new("fit", vec![(lo, f.intercept + f.c_model * lo), (hi, f.intercept + f.c_model * hi)], Mark::Line));
                notes.push(format!("C_model = {:.4} bits/param, R^2 = {:.4}", f.c_model, f.r2));
            }
            None => notes.push(format!("no fit: {}", self.fit_error.clone().unwrap_or_default())),
        }
        let plot = Plot {
            title: "Capacity plateau vs parameters".into(),
            x_label: "P (parameters)".into(),
            y_label: "plateau (bits)".into(),
            series,
            notes,
            ..Default::default()
        };
        let path = out.join("capacity_plateau.svg");
        fs::write(&path, plot.render())?;
        files.push(path);
        self.coverage.write(out, &mut files)?;
        Ok(files)
    }

    fn coverage_note(&self) -> Vec<String> {
        if self.coverage.complete() { Vec::new() } else { vec![self.coverage.summary()] }
    }
}

/// The job's capacity constant: given directly, or fitted from the capacity
/// runs already in the registry.
pub fn resolve_c_model(job: &JobSpec, registry: &Registry) -> Result<Option<f64>> {
    match job.c_model {
        Some(CModelSource::Value(c)) => Ok(Some(c)),
        Some(CModelSource::Named(_)) | None => {
            let records = registry.done_records(ExperimentKind::Capacity)?;
            if records.is_empty() {
                return Ok(None);
            }
            let curves = aggregate_capacity(&records)?;
            Ok(fit_capacity_line(&curves).ok().map(|f| f.c_model))
        }
    }
}

// ------------------------------------------------------------------- speed

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedCellReport {
    pub cell: String,
    pub prime: u64,
    pub curve: SpeedCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedReport {
    pub c_model: Option<f64>,
    pub cells: Vec<SpeedCellReport>,
    /// Pooled over every cell's points with `f <= 0.25`.
    pub fit: Option<ExponentialFit>,
    pub fit_error: Option<String>,
    pub coverage: Coverage,
}

pub fn speed_report(registry: &Registry, job: &JobSpec, max_dim: Option<usize>) -> Result<SpeedReport> {
    let c_model = resolve_c_model(job, registry)?;
    let mut coverage = Coverage::default();
    let mut cells = Vec::new();
    for cell in job.cells() {
        let (records, cov) = collect(registry, &job.cell_specs(ExperimentKind::Speed, &cell, max_dim)?)?;
        coverage.merge(cov);
        let curve = aggregate_speed(&records, CurveKind::Mem, c_model)?;
        cells.push(SpeedCellReport { cell: cell.label(), prime: cell.task.prime, curve });
    }
    let pooled: Vec<(f64, f64)> =
        cells.iter().flat_map(|c| c.curve.points.iter().filter_map(|p| Some((p.f?, p.mean?)))).collect();
    let (fit, fit_error) = if c_model.is_none() {
        (None, Some("no capacity constant available".to_string()))
    } else {
        match fit_speed_exponential(&pooled) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Ok(SpeedReport { c_model, cells, fit, fit_error, coverage })
}

impl SpeedReport {
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out)?;
        let mut files = Vec::new();
        let mut rows = Vec::new();
        for c in &self.cells {
            for p in &c.curve.points {
                let inv = self.c_model.map(|cm| 1.0 / (cm * p.params as f64));
                rows.push(vec![
                    c.cell.clone(),
                    p.dim.to_string(),
                    p.params.to_string(),
                    fmt_f64(p.complexity_bits),
                    opt_cell(p.mean),
                    p.per_seed.len().to_string(),
                    p.censored_seeds.to_string(),
                    opt_cell(p.f),
                    opt_cell(inv),
                ]);
            }
        }
        let path = out.join("speed_points.csv");
        write_csv(
            &path,
            &["cell", "dim", "params", "complexity_bits", "mean_t_mem", "seeds", "censored_seeds", "f", "inv_c_p"],
            &rows,
        )?;
        files.push(path);
        let path = out.join("speed_fit.json");
        write_json(&path, &self.fit)?;
        files.push(path);

        let mut notes: Vec<String> = Vec::new();
        if !self.coverage.complete() {
            notes.push(self.coverage.summary());
        }
        if let Some(c) = self.c_model {
            let by_inv = self
                .cells
                .iter()
                .map(|cell| {
                    let pts = cell.curve.means().into_iter().map(|(p, t)| (1.0 / (c * p as f64), t)).collect();
                    Series::new(cell.cell.clone(), pts, Mark::Scatter)
                })
                .collect();
            let plot = Plot {
                title: "Memorisation time vs inverse capacity".into(),
                x_label: "1 / (C_model P)".into(),
                y_label: "T_mem (epochs)".into(),
                log_x: true,
                log_y: true,
                series: by_inv,
                notes: notes.clone(),
                ..Default::default()
            };
            let path = out.join("speed_vs_inverse_capacity.svg");
            fs::write(&path, plot.render())?;
            files.push(path);

            let mut series: Vec<Series> = self
                .cells
                .iter()
                .map(|cell| {
                    let pts = cell.curve.points.iter().filter_map(|p| Some((p.f?, p.mean?))).collect();
                    Series::new(cell.cell.clone(), pts, Mark::Scatter)
                })
                .collect();
            let mut notes = notes.clone();
            match &self.fit {
                Some(f) => {
                    let pts = (0..=20).map(|i| {
                        let x = crate::pipelines::EXP_FIT_MAX_F * i as f64 / 20.0;
                        (x, f.b * (f.a * x).exp())
                    });
                    series.push(Series::new("exponential fit", pts.collect(), Mark::Line));
                    notes.push(format!("T = {:.3} exp({:.3} f), R^2 = {:.3}", f.b, f.a, f.r2));
                }
                None => notes.push(format!("no fit: {}", self.fit_error.clone().unwrap_or_default())),
            }
            let plot = Plot {
                title: "Memorisation time vs capacity fraction".into(),
                x_label: "f = K / (C_model P)".into(),
                y_label: "T_mem (epochs)".into(),
                log_y: true,
                series,
                notes,
                ..Default::default()
            };
            let path = out.join("speed_vs_f.svg");
            fs::write(&path, plot.render())?;
            files.push(path);
        }
        self.coverage.write(out, &mut files)?;
        Ok(files)
    }
}

// -------------------------------------------------------------------- grok

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrokCellReport {
    pub cell: String,
    #[serde(skip)]
    pub source: Cell,
    pub points: Vec<GrokPoint>,
    pub gen: SpeedCurve,
    /// Matched memorisation-speed curve, when its runs exist.
    pub mem: Option<SpeedCurve>,
    pub estimate: OnsetEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrokReport {
    pub c_model: Option<f64>,
    pub cells: Vec<GrokCellReport>,
    pub coverage: Coverage,
    /// Coverage of the matched speed runs; only required by intersection.
    pub mem_coverage: Coverage,
}

pub fn grok_report(registry: &Registry, job: &JobSpec, max_dim: Option<usize>) -> Result<GrokReport> {
    let c_model = resolve_c_model(job, registry)?;
    let speed_job = job.matched_speed_job();
    let mut coverage = Coverage::default();
    let mut mem_coverage = Coverage::default();
    let mut cells = Vec::new();
    for cell in job.cells() {
        let (records, cov) = collect(registry, &job.cell_specs(ExperimentKind::Grok, &cell, max_dim)?)?;
        coverage.merge(cov);
        let (points, gen) = if records.is_empty() {
            (Vec::new(), SpeedCurve { kind: CurveKind::Gen, points: Vec::new() })
        } else {
            aggregate_grok(&records, c_model)?
        };
        let (mem_records, mcov) = collect(registry, &speed_job.cell_specs(ExperimentKind::Speed, &cell, max_dim)?)?;
        mem_coverage.merge(mcov);
        let mem = (!mem_records.is_empty()).then(|| aggregate_speed(&mem_records, CurveKind::Mem, c_model)).transpose()?;
        let estimate = estimate_onset(&cell.task, &points, &gen, mem.as_ref(), c_model)?;
        cells.push(GrokCellReport { cell: cell.label(), source: cell, points, gen, mem, estimate });
    }
    Ok(GrokReport { c_model, cells, coverage, mem_coverage })
}

fn delay_cells(d: Option<Delay>) -> (String, String) {
    match d {
        Some(Delay::Measured(v)) => ("measured".into(), v.to_string()),
        Some(Delay::AtLeast(v)) => ("at_least".into(), v.to_string()),
        Some(Delay::Undefined) | None => ("undefined".into(), ABSENT.into()),
    }
}

fn regime_str(r: Regime) -> &'static str {
    match r {
        Regime::UnderCapacity => "under_capacity",
        Regime::Immediate => "immediate",
        Regime::Grokking => "grokking",
    }
}

impl GrokCellReport {
    /// `log10(P_onset / P_cross)` when both exist.
    pub fn log_ratio(&self) -> Option<f64> {
        let e = &self.estimate;
        Some((e.p_onset? as f64 / e.p_cross?).log10())
    }

    pub fn note(&self) -> &'static str {
        if self.estimate.p_onset.is_none() {
            ONSET_ABSENT_NOTE
        } else if self.estimate.p_cross.is_none() {
            "no intersection in range"
        } else {
            ""
        }
    }

    fn plot(&self, coverage_note: Option<String>) -> Plot {
        let mut series = Vec::new();
        let delays: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter_map(|p| p.delta_e.and_then(Delay::lower_bound).map(|d| (p.params as f64, d as f64)))
            .collect();
        series.push(Series::new("delta E (seed min)", delays, Mark::Scatter));
        let pos = |v: Vec<(usize, f64)>| v.into_iter().filter(|p| p.1 > 0.0).map(|(p, t)| (p as f64, t)).collect();
        series.push(Series::new("T_gen", pos(self.gen.means()), Mark::Line).right());
        if let Some(m) = &self.mem {
            series.push(Series::new("T_mem", pos(m.means()), Mark::Line).right());
        }
        let mut notes: Vec<String> = coverage_note.into_iter().collect();
        let e = &self.estimate;
        notes.push(format!(
            "onset: {}   crossing: {}",
            e.p_onset.map_or_else(|| ABSENT.to_string(), |p| p.to_string()),
            e.p_cross.map_or_else(|| ABSENT.to_string(), |p| format!("{p:.0}"))
        ));
        if !self.note().is_empty() {
            notes.push(self.note().to_string());
        }
        Plot {
            title: format!("Generalisation delay: {}", self.cell),
            x_label: "P (parameters)".into(),
            y_label: "delta E (epochs)".into(),
            y2_label: Some("saturation epoch".into()),
            log_x: true,
            log_y2: true,
            series,
            // The crosshair exists only when the grid groks and the curves cross.
            crosshair_x: e.p_onset.and(e.p_cross),
            notes,
            ..Default::default()
        }
    }
}

impl GrokReport {
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out)?;
        let mut files = Vec::new();
        let mut rows = Vec::new();
        for c in &self.cells {
            let mem: BTreeMap<usize, f64> = c.mem.as_ref().map(|m| m.means().into_iter().collect()).unwrap_or_default();
            let gen: BTreeMap<usize, f64> = c.gen.means().into_iter().collect();
            for p in &c.points {
                let (kind, value) = delay_cells(p.delta_e);
                let saturated = p.seeds.iter().filter(|s| s.e_train.is_some()).count();
                rows.push(vec![
                    c.cell.clone(),
                    p.dim.to_string(),
                    p.params.to_string(),
                    regime_str(p.regime).to_string(),
                    kind,
                    value,
                    format!("{saturated}/{}", p.seeds.len()),
                    p.all_generalised.to_string(),
                    opt_cell(gen.get(&p.params).copied()),
                    opt_cell(mem.get(&p.params).copied()),
                ]);
            }
        }
        let path = out.join("grok_delays.csv");
        write_csv(
            &path,
            &["cell", "dim", "params", "regime", "delay_kind", "delta_e", "train_saturated", "all_generalised", "mean_t_gen", "mean_t_mem"],
            &rows,
        )?;
        files.push(path);

        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                let e = &c.estimate;
                vec![
                    c.cell.clone(),
                    e.prime.to_string(),
                    e.operation.to_string(),
                    fmt_f64(e.train_fraction),
                    fmt_f64(dataset_complexity(e.prime, e.train_fraction, e.operation)),
                    opt_cell(e.p_mem),
                    e.p_onset.map_or_else(|| ABSENT.to_string(), |p| p.to_string()),
                    opt_cell(e.p_cross),
                    opt_cell(c.log_ratio()),
                    c.note().to_string(),
                ]
            })
            .collect();
        let path = out.join("onset_summary.csv");
        write_csv(
            &path,
            &["cell", "prime", "operation", "train_fraction", "complexity_bits", "p_mem", "p_onset", "p_cross", "log10_onset_over_cross", "note"],
            &rows,
        )?;
        files.push(path);
        let path = out.join("grok_report.json");
        write_json(&path, self)?;
        files.push(path);
        let note = (!self.coverage.complete()).then(|| self.coverage.summary());
        for c in &self.cells {
            let path = out.join(format!("grok_{}.svg", c.cell));
            fs::write(&path, c.plot(note.clone()).render())?;
            files.push(path);
        }
        self.coverage.write(out, &mut files)?;
        Ok(files)
    }

    /// Cells with both an onset and a crossing, with the job's swept axes as
    /// covariates.
    pub fn onset_table(&self, job: &JobSpec) -> OnsetTable {
        let axes = job.swept_axes();
        let rows = self
            .cells
            .iter()
            .filter_map(|c| {
                let e = &c.estimate;
                let (onset, cross) = (e.p_onset?, e.p_cross?);
                let src = &c.source;
                let covariates = axes
                    .iter()
                    .map(|&a| {
                        let v = match a {
                            "weight_decay" => Covariate::Numeric(src.axes.weight_decay),
                            "lr" => Covariate::Numeric(src.axes.lr),
                            "init_scale" => Covariate::Numeric(src.axes.init_scale),
                            "depth" => Covariate::Numeric(src.axes.depth as f64),
                            "prime" => Covariate::Numeric(src.task.prime as f64),
                            "train_fraction" => Covariate::Numeric(src.task.train_fraction),
                            _ => Covariate::Categorical(src.task.operation.to_string()),
                        };
                        (a.to_string(), v)
                    })
                    .collect();
                Some(OnsetRow { cell: c.cell.clone(), pred_log10: cross.log10(), emp_log10: (onset as f64).log10(), covariates })
            })
            .collect();
        OnsetTable { rows }
    }
}

// ------------------------------------------------------------------- stats

/// Writes `report.txt` (table layout) and `report.json`.
pub fn write_stats_report(report: &TestReport, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let txt = out.join("report.txt");
    fs::write(&txt, report.render_table())?;
    let json = out.join("report.json");
    write_json(&json, report)?;
    Ok(vec![txt, json])
}

/// Report for `kind`, computed from the registry and written under `out`.
/// Returns the files and whether every run the job names was present.
pub fn emit_report(registry: &Registry, job: &JobSpec, max_dim: Option<usize>, out: &Path) -> Result<(Vec<PathBuf>, Coverage)> {
    match job.kind {
        ExperimentKind::Capacity => {
            let r = capacity_report(registry, job, max_dim)?;
            Ok((r.write(out)?, r.coverage))
        }
        ExperimentKind::Speed => {
            let r = speed_report(registry, job, max_dim)?;
            Ok((r.write(out)?, r.coverage))
        }
        ExperimentKind::Grok => {
            let r = grok_report(registry, job, max_dim)?;
            Ok((r.write(out)?, r.coverage))
        }
    }
}

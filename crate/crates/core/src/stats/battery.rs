//! Onset tables, nested OLS sufficiency tests, residual robustness, and the
//! full battery report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::special::{f_sf, t_two_sided_p};
use super::{
    holm_adjust, kendall, lin_ccc, mean, ols_loglog, spearman, wilcoxon_signed_rank, CccResult, KendallResult,
    OlsLogLog, SpearmanResult, WilcoxonResult,
};
use crate::error::{invalid_input, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariate {
    Numeric(f64),
    Categorical(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetRow {
    pub cell: String,
    pub pred_log10: f64,
    pub emp_log10: f64,
    pub covariates: BTreeMap<String, Covariate>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OnsetTable {
    pub rows: Vec<OnsetRow>,
}

impl OnsetTable {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.rows.first() else {
            return Err(Error::InsufficientData("onset table has no rows".into()));
        };
        let keys: Vec<&String> = first.covariates.keys().collect();
        for r in &self.rows {
            if !r.pred_log10.is_finite() || !r.emp_log10.is_finite() {
                return Err(invalid_input(format!("cell {}: missing or non-finite log value", r.cell)));
            }
            if r.covariates.keys().collect::<Vec<_>>() != keys {
                return Err(invalid_input(format!("cell {}: covariate keys differ from the first row", r.cell)));
            }
        }
        for k in &keys {
            let numeric = matches!(first.covariates[*k], Covariate::Numeric(_));
            if self.rows.iter().any(|r| matches!(r.covariates[*k], Covariate::Numeric(_)) != numeric) {
                return Err(invalid_input(format!("covariate {k} mixes numeric and categorical values")));
            }
        }
        Ok(())
    }

    pub fn pred(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.pred_log10).collect()
    }

    pub fn emp(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.emp_log10).collect()
    }

    /// Per-cell `emp - pred`, i.e. `log10(P_onset / P_cross)`.
    pub fn log_residuals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.emp_log10 - r.pred_log10).collect()
    }

    pub fn axes(&self) -> Vec<String> {
        self.rows.first().map(|r| r.covariates.keys().cloned().collect()).unwrap_or_default()
    }

    /// CSV with columns `cell,pred_log10,emp_log10,<axes...>`.
    pub fn to_csv(&self) -> String {
        let axes = self.axes();
        let mut out = String::from("cell,pred_log10,emp_log10");
        for a in &axes {
            out.push(',');
            out.push_str(a);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{}",
                r.cell,
                crate::report::fmt_f64(r.pred_log10),
                crate::report::fmt_f64(r.emp_log10)
            );
            for a in &axes {
                match &r.covariates[a] {
                    Covariate::Numeric(v) => {
                        let _ = write!(out, ",{}", crate::report::fmt_f64(*v));
                    }
                    Covariate::Categorical(s) => {
                        let _ = write!(out, ",{s}");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Reads an onset table. A covariate column is numeric when every cell in it
/// parses as a number, categorical otherwise.
pub fn read_onset_table<R: Read>(input: R) -> Result<OnsetTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expected = ["cell", "pred_log10", "emp_log10"];
    if headers.len() < 3 || headers[..3] != expected {
        return Err(invalid_input(format!("onset table header must start with {expected:?}, got {headers:?}")));
    }
    let mut raw: Vec<csv::StringRecord> = Vec::new();
    for rec in rdr.records() {
        raw.push(rec?);
    }
    let axes = &headers[3..];
    let numeric: Vec<bool> =
        (0..axes.len()).map(|k| raw.iter().all(|r| r.get(3 + k).is_some_and(|s| s.parse::<f64>().is_ok()))).collect();
    let parse = |s: Option<&str>, what: &str, line: usize| -> Result<f64> {
        s.filter(|s| !s.is_empty())
            .ok_or_else(|| invalid_input(format!("row {line}: missing {what}")))?
            .parse::<f64>()
            .map_err(|e| invalid_input(format!("row {line}: {what}: {e}")))
    };
    let mut rows = Vec::with_capacity(raw.len());
    for (i, r) in raw.iter().enumerate() {
        let line = i + 2;
        let mut covariates = BTreeMap::new();
        for (k, name) in axes.iter().enumerate() {
            let cell = r.get(3 + k).unwrap_or("");
            let v = if numeric[k] {
                Covariate::Numeric(cell.parse().expect("checked numeric"))
            } else {
                Covariate::Categorical(cell.to_string())
            };
            covariates.insert(name.clone(), v);
        }
        rows.push(OnsetRow {
            cell: r.get(0).unwrap_or("").to_string(),
            pred_log10: parse(r.get(1), "pred_log10", line)?,
            emp_log10: parse(r.get(2), "emp_log10", line)?,
            covariates,
        });
    }
    let table = OnsetTable { rows };
    table.validate()?;
    Ok(table)
}

/// Design-matrix columns marked by name.
struct Design {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

impl Design {
    fn intercept(n: usize) -> Self {
        Design { names: vec!["intercept".into()], cols: vec![vec![1.0; n]] }
    }

    fn push(&mut self, name: String, col: Vec<f64>) {
        self.names.push(name);
        self.cols.push(col);
    }
}

fn covariate_columns(table: &OnsetTable) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for axis in table.axes() {
        match &table.rows[0].covariates[&axis] {
            Covariate::Numeric(_) => {
                let col = table
                    .rows
                    .iter()
                    .map(|r| match &r.covariates[&axis] {
                        Covariate::Numeric(v) => *v,
                        Covariate::Categorical(_) => unreachable!("validated"),
                    })
                    .collect();
                out.push((axis, col));
            }
            Covariate::Categorical(_) => {
                let levels = categorical_levels(table, &axis);
                for level in levels.iter().skip(1) {
                    let col = table
                        .rows
                        .iter()
                        .map(|r| match &r.covariates[&axis] {
                            Covariate::Categorical(s) if s == level => 1.0,
                            _ => 0.0,
                        })
                        .collect();
                    out.push((format!("{axis}={level}"), col));
                }
            }
        }
    }
    out
}

fn categorical_levels(table: &OnsetTable, axis: &str) -> Vec<String> {
    let mut levels: Vec<String> = table
        .rows
        .iter()
        .filter_map(|r| match &r.covariates[axis] {
            Covariate::Categorical(s) => Some(s.clone()),
            Covariate::Numeric(_) => None,
        })
        .collect();
    levels.sort();
    levels.dedup();
    levels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub name: String,
    pub columns: Vec<String>,
    /// Columns removed because they were linear combinations of earlier ones.
    pub aliased: Vec<String>,
    pub rank: usize,
    pub rss: f64,
    pub r2: f64,
    #[serde(with = "crate::report::serde_f64")]
    pub adj_r2: f64,
}

/// Columns whose Gram-Schmidt remainder falls below this fraction of their
/// norm are aliased.
const ALIAS_TOL: f64 = 1e-10;

/// Least squares by modified Gram-Schmidt; returns the fit with its RSS.
fn fit_design(name: &str, design: &Design, y: &[f64]) -> ModelFit {
    let n = y.len();
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut aliased = Vec::new();
    for (col, cname) in design.cols.iter().zip(&design.names) {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = col.clone();
        for qk in &q {
            let proj: f64 = qk.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(qk).for_each(|(vi, qi)| *vi -= proj * qi);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= ALIAS_TOL * norm0 {
            aliased.push(cname.clone());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
        kept.push(cname.clone());
    }
    let mut r = y.to_vec();
    for qk in &q {
        let proj: f64 = qk.iter().zip(&r).map(|(a, b)| a * b).sum();
        r.iter_mut().zip(qk).for_each(|(ri, qi)| *ri -= proj * qi);
    }
    let rss: f64 = r.iter().map(|v| v * v).sum();
    let my = mean(y);
    let tss: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let rank = q.len();
    let r2 = if tss > 0.0 { (1.0 - rss / tss).max(0.0) } else { 0.0 };
    let adj_r2 = if n > rank { 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n - rank) as f64 } else { f64::NAN };
    ModelFit { name: name.into(), columns: kept, aliased, rank, rss, r2, adj_r2 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedComparison {
    pub full: String,
    pub reduced: String,
    pub df_num: usize,
    pub df_den: usize,
    /// `+inf` when the full model fits exactly but the reduced one does not.
    #[serde(with = "crate::report::serde_f64")]
    pub f: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedReport {
    pub models: Vec<ModelFit>,
    /// M1 vs M0, M3 vs M2, M3 vs M1; `None` where the models have equal rank.
    pub m1_vs_m0: Option<NestedComparison>,
    pub m3_vs_m2: Option<NestedComparison>,
    pub m3_vs_m1: Option<NestedComparison>,
}

const EXACT_RSS_REL: f64 = 1e-24;

fn compare(full: &ModelFit, reduced: &ModelFit, n: usize, scale: f64) -> Option<NestedComparison> {
    let dp = full.rank.checked_sub(reduced.rank).filter(|&d| d > 0)?;
    let df_den = n - full.rank;
    let zero = EXACT_RSS_REL * scale;
    let (f, p) = if full.rss <= zero {
        if reduced.rss <= zero {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        }
    } else {
        let num = (reduced.rss - full.rss).max(0.0) / dp as f64;
        let f = num / (full.rss / df_den as f64);
        (f, f_sf(f, dp as f64, df_den as f64))
    };
    Some(NestedComparison { full: full.name.clone(), reduced: reduced.name.clone(), df_num: dp, df_den, f, p })
}

/// Nested OLS models for the empirical onset: M0 intercept, M1 adds the
/// predicted crossing, M2 the covariates, M3 both.
pub fn nested_ols(table: &OnsetTable) -> Result<NestedReport> {
    table.validate()?;
    let n = table.rows.len();
    let y = table.emp();
    let covs = covariate_columns(table);
    let p3 = 2 + covs.len();
    if n <= p3 {
        return Err(Error::InsufficientData(format!("nested OLS needs n > {p3}, got {n}")));
    }
    let m0 = Design::intercept(n);
    let mut m1 = Design::intercept(n);
    m1.push("pred_log10".into(), table.pred());
    let mut m2 = Design::intercept(n);
    let mut m3 = Design::intercept(n);
    m3.push("pred_log10".into(), table.pred());
    for (name, col) in covs {
        m2.push(name.clone(), col.clone());
        m3.push(name, col);
    }
    let fits = [
        fit_design("M0", &m0, &y),
        fit_design("M1", &m1, &y),
        fit_design("M2", &m2, &y),
        fit_design("M3", &m3, &y),
    ];
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(1.0);
    Ok(NestedReport {
        m1_vs_m0: compare(&fits[1], &fits[0], n, scale),
        m3_vs_m2: compare(&fits[3], &fits[2], n, scale),
        m3_vs_m1: compare(&fits[3], &fits[1], n, scale),
        models: fits.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisRobustness {
    pub axis: String,
    /// OLS slope of residual on the axis; absent for categorical axes.
    pub slope: Option<f64>,
    /// t statistic for numeric axes, one-way F for categorical ones.
    #[serde(with = "crate::report::serde_f64")]
    pub statistic: f64,
    pub p_raw: f64,
    pub p_holm: f64,
}

fn numeric_axis_test(x: &[f64], r: &[f64]) -> (Option<f64>, f64, f64) {
    let n = x.len();
    let (mx, mr) = (mean(x), mean(r));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 || n < 3 {
        return (Some(0.0), 0.0, 1.0);
    }
    let sxr: f64 = x.iter().zip(r).map(|(a, b)| (a - mx) * (b - mr)).sum();
    let slope = sxr / sxx;
    let rss: f64 = x.iter().zip(r).map(|(a, b)| (b - mr - slope * (a - mx)).powi(2)).sum();
    let df = (n - 2) as f64;
    if rss <= EXACT_RSS_REL * r.iter().map(|v| v * v).sum::<f64>().max(1.0) {
        return if slope == 0.0 { (Some(0.0), 0.0, 1.0) } else { (Some(slope), f64::INFINITY, 0.0) };
    }
    let se = (rss / df / sxx).sqrt();
    let t = slope / se;
    (Some(slope), t, t_two_sided_p(t, df))
}

fn categorical_axis_test(groups: &[String], r: &[f64]) -> (Option<f64>, f64, f64) {
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (g, v) in groups.iter().zip(r) {
        by.entry(g.as_str()).or_default().push(*v);
    }
    let k = by.len();
    let n = r.len();
    if k < 2 || n <= k {
        return (None, 0.0, 1.0);
    }
    let grand = mean(r);
    let ssb: f64 = by.values().map(|g| g.len() as f64 * (mean(g) - grand).powi(2)).sum();
    let ssw: f64 = by.values().map(|g| {
        let m = mean(g);
        g.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    }).sum();
    if ssw <= EXACT_RSS_REL * r.iter().map(|v| v * v).sum::<f64>().max(1.0) {
        return if ssb == 0.0 { (None, 0.0, 1.0) } else { (None, f64::INFINITY, 0.0) };
    }
    let (d1, d2) = ((k - 1) as f64, (n - k) as f64);
    let f = (ssb / d1) / (ssw / d2);
    (None, f, f_sf(f, d1, d2))
}

/// Per-axis test of residual against covariate, Holm-adjusted across axes.
pub fn robustness_residuals(table: &OnsetTable, residuals: &[f64]) -> Result<Vec<AxisRobustness>> {
    table.validate()?;
    if residuals.len() != table.rows.len() {
        return Err(invalid_input("robustness: residual count differs from row count"));
    }
    let axes = table.axes();
    if axes.is_empty() {
        return Err(invalid_input("robustness needs at least one covariate axis"));
    }
    let mut out = Vec::new();
    for axis in &axes {
        let (slope, statistic, p_raw) = match &table.rows[0].covariates[axis] {
            Covariate::Numeric(_) => {
                let x: Vec<f64> = table
                    .rows
                    .iter()
                    .map(|r| match &r.covariates[axis] {
                        Covariate::Numeric(v) => *v,
                        Covariate::Categorical(_) => unreachable!("validated"),
                    })
                    .collect();
                numeric_axis_test(&x, residuals)
            }
            Covariate::Categorical(_) => {
                let g: Vec<String> = table
                    .rows
                    .iter()
                    .map(|r| match &r.covariates[axis] {
                        Covariate::Categorical(s) => s.clone(),
                        Covariate::Numeric(_) => unreachable!("validated"),
                    })
                    .collect();
                categorical_axis_test(&g, residuals)
            }
        };
        out.push(AxisRobustness { axis: axis.clone(), slope, statistic, p_raw, p_holm: p_raw });
    }
    let raw: Vec<f64> = out.iter().map(|a| a.p_raw).collect();
    for (a, h) in out.iter_mut().zip(holm_adjust(&raw)) {
        a.p_holm = h;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryOptions {
    pub n_perm: usize,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        BatteryOptions { n_perm: 10_000, n_boot: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub n_cells: usize,
    pub spearman: SpearmanResult,
    pub kendall: KendallResult,
    pub ccc: CccResult,
    pub ols: OlsLogLog,
    pub wilcoxon: WilcoxonResult,
    pub nested: Option<NestedReport>,
    /// Absent when the table has no covariate axes.
    pub robustness: Option<Vec<AxisRobustness>>,
}

/// Runs every test on one onset table. The permutation and bootstrap loops
/// use independent streams derived from `opts.seed`.
pub fn run_battery(table: &OnsetTable, opts: &BatteryOptions) -> Result<TestReport> {
    table.validate()?;
    let x = table.pred();
    let y = table.emp();
    let resid = table.log_residuals();
    let nested = match nested_ols(table) {
        Ok(r) => Some(r),
        Err(Error::InsufficientData(_)) => None,
        Err(e) => return Err(e),
    };
    let robustness = if table.axes().is_empty() { None } else { Some(robustness_residuals(table, &resid)?) };
    Ok(TestReport {
        n_cells: table.rows.len(),
        spearman: spearman(&x, &y, opts.n_perm, opts.seed)?,
        kendall: kendall(&x, &y)?,
        ccc: lin_ccc(&x, &y, opts.n_boot, opts.seed.wrapping_add(1))?,
        ols: ols_loglog(&x, &y)?,
        wilcoxon: wilcoxon_signed_rank(&resid)?,
        nested,
        robustness,
    })
}

fn fmt_p(p: f64) -> String {
    if p == 0.0 {
        "0".into()
    } else if p >= 0.01 {
        format!("{p:.3}")
    } else {
        format!("{p:.2e}")
    }
}

fn fmt_stat(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

impl TestReport {
    /// Three-column table: sub-claim / test, statistic, p-value.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, String, String)> = Vec::new();
        let section = |rows: &mut Vec<(String, String, String)>, t: &str| rows.push((t.into(), String::new(), String::new()));
        section(&mut rows, "(1) Rank predictiveness");
        let s = &self.spearman;
        rows.push((
            "  Spearman rho".into(),
            fmt_stat(s.rho),
            format!("p_perm={} (t: {})", fmt_p(s.p_perm), fmt_p(s.p_analytic)),
        ));
        rows.push(("  Kendall tau".into(), fmt_stat(self.kendall.tau), fmt_p(self.kendall.p)));
        section(&mut rows, "(2) Calibration to y=x");
        let c = &self.ccc;
        rows.push((
            "  Lin's CCC (95% CI)".into(),
            format!("{} [{}, {}]", fmt_stat(c.ccc), fmt_stat(c.ci_lo), fmt_stat(c.ci_hi)),
            "-".into(),
        ));
        rows.push(("  Slope b (log-log OLS)".into(), fmt_stat(self.ols.b), "-".into()));
        rows.push(("  Intercept a".into(), fmt_stat(self.ols.a), "-".into()));
        rows.push(("  Joint F-test for (a=0, b=1)".into(), format!("F={}", fmt_stat(self.ols.f)), fmt_p(self.ols.p)));
        rows.push((
            "  Wilcoxon on log-residuals".into(),
            format!("median {}", fmt_stat(self.wilcoxon.median)),
            fmt_p(self.wilcoxon.p),
        ));
        section(&mut rows, "(3) Sufficiency vs. baselines (nested OLS)");
        let labels = [
            ("  M1 vs M0 (intersection has signal)", self.nested.as_ref().and_then(|n| n.m1_vs_m0.clone())),
            ("  M3 vs M2 (intersection adds over covariates)", self.nested.as_ref().and_then(|n| n.m3_vs_m2.clone())),
            ("  M3 vs M1 (covariates add over intersection)", self.nested.as_ref().and_then(|n| n.m3_vs_m1.clone())),
        ];
        for (label, cmp) in labels {
            match cmp {
                Some(c) => rows.push((label.into(), format!("F={}", fmt_stat(c.f)), fmt_p(c.p))),
                None => rows.push((label.into(), "skipped".into(), "-".into())),
            }
        }
        if let Some(n) = &self.nested {
            for m in &n.models {
                rows.push((
                    format!("    {} R2 / adj R2", m.name),
                    format!("{} / {}", fmt_stat(m.r2), fmt_stat(m.adj_r2)),
                    if m.aliased.is_empty() { String::new() } else { format!("aliased: {}", m.aliased.join(" ")) },
                ));
            }
        }
        if let Some(rob) = &self.robustness {
            section(&mut rows, "(4) Robustness of residuals across axes");
            for a in rob {
                let stat = match a.slope {
                    Some(s) => format!("slope {}", fmt_stat(s)),
                    None => format!("F={}", fmt_stat(a.statistic)),
                };
                rows.push((format!("  {}", a.axis), stat, format!("{} (Holm {})", fmt_p(a.p_raw), fmt_p(a.p_holm))));
            }
        }
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(20);
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(9);
        let mut out = format!("{:<w0$}  {:<w1$}  {}\n", "Sub-claim / Test", "Statistic", "p-value");
        out.push_str(&format!("{}\n", "-".repeat(w0 + w1 + 14)));
        for (a, b, c) in rows {
            out.push_str(format!("{a:<w0$}  {b:<w1$}  {c}").trim_end());
            out.push('\n');
        }
        out.push_str(&format!("n = {} cells\n", self.n_cells));
        out
    }
}

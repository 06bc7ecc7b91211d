//! Hypothesis tests over (predicted crossing, empirical onset) pairs in
//! log10 coordinates: rank correlations, calibration, nested-model
//! sufficiency and residual robustness.

pub mod battery;
pub mod special;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use special::{f_sf, normal_sf, t_two_sided_p};

pub use battery::{
    nested_ols, read_onset_table, robustness_residuals, run_battery, AxisRobustness, BatteryOptions, Covariate,
    ModelFit, NestedComparison, NestedReport, OnsetRow, OnsetTable, TestReport,
};

/// Kendall p-values are exact by enumeration below this sample size.
pub const KENDALL_EXACT_BELOW: usize = 8;
/// Wilcoxon p-values are exact by dynamic programming up to this size.
pub const WILCOXON_EXACT_MAX: usize = 25;

fn require_len(x: &[f64], y: &[f64], min: usize, what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(invalid_input(format!("{what}: length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::InsufficientData(format!("{what} needs n >= {min}, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid_input(format!("{what}: non-finite input")));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median with the midpoint rule for even lengths.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    doubled_ranks(v).into_iter().map(|r| r as f64 / 2.0).collect()
}

/// Twice the average ranks, which keeps tied ranks integral.
fn doubled_ranks(v: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0u64; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged, doubled
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            out[k] = doubled;
        }
        i = j + 1;
    }
    out
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    require_len(x, y, 2, "pearson")?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok(pearson_unchecked(x, y))
}

/// Generator for resample `index` of a seeded loop: one ChaCha stream each.
fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_analytic: f64,
    pub p_perm: f64,
    pub n_perm: usize,
}

fn spearman_p_analytic(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    t_two_sided_p(rho * (df / (1.0 - rho * rho)).sqrt(), df)
}

/// Rank correlations within this distance of the observed one count as ties
/// in the permutation tail.
const PERM_TIE_EPS: f64 = 1e-12;

/// Spearman's rho with a t-approximation p and an add-one permutation p
/// over `n_perm` seeded shuffles of `y`.
pub fn spearman(x: &[f64], y: &[f64], n_perm: usize, perm_seed: u64) -> Result<SpearmanResult> {
    require_len(x, y, 3, "spearman")?;
    if n_perm == 0 {
        return Err(invalid_input("spearman: n_perm must be >= 1"));
    }
    if is_constant(x) || is_constant(y) {
        return Err(Error::UndefinedCorrelation("spearman: constant input".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson_unchecked(&rx, &ry);
    let mut hits = 0usize;
    let mut perm = ry.clone();
    for i in 0..n_perm {
        perm.copy_from_slice(&ry);
        perm.shuffle(&mut substream(perm_seed, i as u64));
        if pearson_unchecked(&rx, &perm).abs() >= rho.abs() - PERM_TIE_EPS {
            hits += 1;
        }
    }
    Ok(SpearmanResult {
        rho,
        p_analytic: spearman_p_analytic(rho, x.len()),
        p_perm: (1 + hits) as f64 / (1 + n_perm) as f64,
        n_perm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallResult {
    pub tau: f64,
    pub p: f64,
    pub exact: bool,
}

/// Concordant minus discordant pairs; pairs tied in either coordinate add 0.
fn kendall_s(x: &[f64], y: &[f64]) -> i64 {
    let mut s = 0i64;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let a = (x[j] - x[i]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (y[j] - y[i]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += a * b;
        }
    }
    s
}

fn tied_pairs(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        total += t * (t - 1.0) / 2.0;
        i = j + 1;
    }
    total
}

/// Calls `f` on every permutation of `v` (Heap's algorithm).
fn for_each_permutation(v: &mut [f64], f: &mut impl FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    f(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            f(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Kendall's tau-b. Exact permutation p for `n < KENDALL_EXACT_BELOW`,
/// otherwise the continuity-corrected normal approximation.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<KendallResult> {
    require_len(x, y, 3, "kendall")?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::UndefinedCorrelation("kendall: constant input".into()));
    }
    let n = x.len();
    let n0 = (n * (n - 1)) as f64 / 2.0;
    let s = kendall_s(x, y);
    let tau = (s as f64 / ((n0 - tied_pairs(x)) * (n0 - tied_pairs(y))).sqrt()).clamp(-1.0, 1.0);
    if n < KENDALL_EXACT_BELOW {
        let mut perm = y.to_vec();
        let (mut hits, mut total) = (0u64, 0u64);
        for_each_permutation(&mut perm, &mut |p| {
            total += 1;
            if kendall_s(x, p).abs() >= s.abs() {
                hits += 1;
            }
        });
        return Ok(KendallResult { tau, p: hits as f64 / total as f64, exact: true });
    }
    let var = n as f64 * (n as f64 - 1.0) * (2.0 * n as f64 + 5.0) / 18.0;
    let z = ((s.abs() as f64 - 1.0).max(0.0)) / var.sqrt();
    Ok(KendallResult { tau, p: (2.0 * normal_sf(z)).min(1.0), exact: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccResult {
    pub ccc: f64,
    #[serde(with = "crate::report::serde_f64")]
    pub ci_lo: f64,
    #[serde(with = "crate::report::serde_f64")]
    pub ci_hi: f64,
    pub n_boot: usize,
}

/// `None` when both inputs are constant.
fn ccc_value(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 && syy == 0.0 {
        return None;
    }
    let denom = sxx / n + syy / n + (mx - my) * (mx - my);
    (denom > 0.0).then(|| (2.0 * sxy / n / denom).clamp(-1.0, 1.0))
}

/// Lin's concordance correlation with a percentile bootstrap 95% interval
/// over row resamples. Resamples where the coefficient is undefined are
/// skipped.
pub fn lin_ccc(x: &[f64], y: &[f64], n_boot: usize, boot_seed: u64) -> Result<CccResult> {
    require_len(x, y, 3, "lin_ccc")?;
    let ccc = ccc_value(x, y).ok_or_else(|| Error::UndefinedCorrelation("lin_ccc: both inputs constant".into()))?;
    let n = x.len();
    let mut boots = Vec::with_capacity(n_boot);
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    for b in 0..n_boot {
        let mut rng = substream(boot_seed, b as u64);
        for k in 0..n {
            let i = rng.random_range(0..n);
            bx[k] = x[i];
            by[k] = y[i];
        }
        if let Some(c) = ccc_value(&bx, &by) {
            boots.push(c);
        }
    }
    let (ci_lo, ci_hi) = if boots.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        boots.sort_by(f64::total_cmp);
        (quantile_sorted(&boots, 0.025), quantile_sorted(&boots, 0.975))
    };
    Ok(CccResult { ccc, ci_lo, ci_hi, n_boot })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsLogLog {
    pub a: f64,
    pub b: f64,
    /// Joint F statistic for `(a, b) = (0, 1)`; `+inf` under an exact fit away from it.
    #[serde(with = "crate::report::serde_f64")]
    pub f: f64,
    pub p: f64,
    pub r2: f64,
    pub residuals: Vec<f64>,
}

/// Residual sums below this fraction of the total sum of squares count as an
/// exact fit.
const EXACT_FIT_REL: f64 = 1e-24;

/// `y = a + b x` by least squares, with the joint F-test of `(a, b) = (0, 1)`
/// against F(2, n-2).
pub fn ols_loglog(x: &[f64], y: &[f64]) -> Result<OlsLogLog> {
    require_len(x, y, 3, "ols_loglog")?;
    if is_constant(x) {
        return Err(invalid_input("ols_loglog: singular design (constant x)"));
    }
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| yi - (a + b * xi)).collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let r2 = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };

    // (beta - r)^T X^T X (beta - r) with X^T X = [[n, Σx], [Σx, Σx²]]
    let sx: f64 = x.iter().sum();
    let sxx_raw: f64 = x.iter().map(|v| v * v).sum();
    let (da, db) = (a, b - 1.0);
    let quad = n * da * da + 2.0 * sx * da * db + sxx_raw * db * db;
    let scale = syy.max(y.iter().map(|v| v * v).sum::<f64>()).max(1.0);
    let (f, p) = if rss <= EXACT_FIT_REL * scale {
        if quad <= 1e-18 * scale {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        }
    } else {
        let s2 = rss / (n - 2.0);
        let f = quad / 2.0 / s2;
        (f, f_sf(f, 2.0, n - 2.0))
    };
    Ok(OlsLogLog { a, b, f, p, r2, residuals })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub median: f64,
    pub p: f64,
    /// Sum of the ranks of positive residuals.
    pub w_plus: f64,
    /// Count after dropping exact zeros.
    pub n_used: usize,
    pub exact: bool,
}

/// Number of sign assignments with each doubled positive-rank sum.
fn signed_rank_counts(doubled: &[u64]) -> Vec<u64> {
    let max: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; max as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Two-sided Wilcoxon signed-rank test of the residuals against zero.
///
/// Exact zeros are dropped; the exact branch covers `n <= WILCOXON_EXACT_MAX`.
pub fn wilcoxon_signed_rank(residuals: &[f64]) -> Result<WilcoxonResult> {
    if residuals.is_empty() {
        return Err(Error::InsufficientData("wilcoxon needs at least one residual".into()));
    }
    if residuals.iter().any(|v| !v.is_finite()) {
        return Err(invalid_input("wilcoxon: non-finite residual"));
    }
    let med = median(residuals);
    let nz: Vec<f64> = residuals.iter().copied().filter(|&r| r != 0.0).collect();
    if nz.is_empty() {
        return Ok(WilcoxonResult { median: 0.0, p: 1.0, w_plus: 0.0, n_used: 0, exact: true });
    }
    let abs: Vec<f64> = nz.iter().map(|r| r.abs()).collect();
    let doubled = doubled_ranks(&abs);
    let w2: u64 = nz.iter().zip(&doubled).filter(|(r, _)| **r > 0.0).map(|(_, d)| *d).sum();
    let n = nz.len();
    if n <= WILCOXON_EXACT_MAX {
        let counts = signed_rank_counts(&doubled);
        let w2 = w2 as usize;
        let le: u64 = counts[..=w2].iter().sum();
        let ge: u64 = counts[w2..].iter().sum();
        let total = 1u64 << n;
        let p = ((2 * le.min(ge)) as f64 / total as f64).min(1.0);
        return Ok(WilcoxonResult { median: med, p, w_plus: w2 as f64 / 2.0, n_used: n, exact: true });
    }
    let nf = n as f64;
    let w = w2 as f64 / 2.0;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let z = ((w - mu).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(WilcoxonResult { median: med, p: (2.0 * normal_sf(z)).min(1.0), w_plus: w, n_used: n, exact: false })
}

/// Holm step-down adjustment; output is in the input order.
pub fn holm_adjust(p_raw: &[f64]) -> Vec<f64> {
    let m = p_raw.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_raw[a].total_cmp(&p_raw[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * p_raw[i]).min(1.0));
        out[i] = running;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0], 100, 0).unwrap();
        assert_eq!(up.rho, 1.0);
        assert_eq!(up.p_analytic, 0.0);
        let down = spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0], 100, 0).unwrap();
        assert_eq!(down.rho, -1.0);
        assert!(matches!(spearman(&x, &[1.0; 5], 10, 0), Err(Error::UndefinedCorrelation(_))));
        assert!(spearman(&x[..2], &x[..2], 10, 0).is_err());
    }

    fn exhaustive_spearman_p(x: &[f64], y: &[f64]) -> f64 {
        let rx = average_ranks(x);
        let obs = pearson_unchecked(&rx, &average_ranks(y)).abs();
        let mut perm = average_ranks(y);
        let (mut hits, mut total) = (0, 0);
        for_each_permutation(&mut perm, &mut |p| {
            total += 1;
            if pearson_unchecked(&rx, p).abs() >= obs - 1e-12 {
                hits += 1;
            }
        });
        hits as f64 / total as f64
    }

    #[test]
    fn spearman_permutation_matches_enumeration_at_n4() {
        let x = [0.3, 1.2, 2.2, 3.9];
        for y in [[0.1, 0.5, 0.4, 0.9], [1.0, 3.0, 2.0, 0.0], [4.0, 3.0, 2.0, 1.0]] {
            let exact = exhaustive_spearman_p(&x, &y);
            let r = spearman(&x, &y, 10_000, 7).unwrap();
            assert!((r.p_perm - exact).abs() <= 0.05, "{} vs {exact}", r.p_perm);
        }
    }

    fn brute_kendall_p(x: &[f64], y: &[f64]) -> f64 {
        // Enumerate all index orders in lexicographic order.
        fn rec(k: usize, used: &mut [bool], cur: &mut Vec<f64>, y: &[f64], out: &mut Vec<Vec<f64>>) {
            if k == y.len() {
                out.push(cur.clone());
                return;
            }
            for i in 0..y.len() {
                if !used[i] {
                    used[i] = true;
                    cur.push(y[i]);
                    rec(k + 1, used, cur, y, out);
                    cur.pop();
                    used[i] = false;
                }
            }
        }
        let mut all = Vec::new();
        rec(0, &mut vec![false; y.len()], &mut Vec::new(), y, &mut all);
        let count = |p: &[f64]| {
            let mut s = 0i64;
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if i < j && (x[i] - x[j]) * (p[i] - p[j]) > 0.0 {
                        s += 1;
                    } else if i < j && (x[i] - x[j]) * (p[i] - p[j]) < 0.0 {
                        s -= 1;
                    }
                }
            }
            s
        };
        let obs = count(y).abs();
        all.iter().filter(|p| count(p).abs() >= obs).count() as f64 / all.len() as f64
    }

    #[test]
    fn kendall_exact_branch_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let k = kendall(&x, &y).unwrap();
            assert!(k.exact);
            assert_eq!(k.p, brute_kendall_p(&x, &y));
        }
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(kendall(&x, &x).unwrap().tau, 1.0);
        assert_eq!(kendall(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap().tau, -1.0);
        assert_eq!(kendall(&x, &x).unwrap().p, 2.0 / 120.0);
    }

    #[test]
    fn kendall_normal_branch() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let k = kendall(&x, &x).unwrap();
        assert!(!k.exact);
        // S = 45, var = 10*9*25/18 = 125
        let z = 44.0 / 125f64.sqrt();
        assert!((k.p - 2.0 * normal_sf(z)).abs() < 1e-15);
    }

    #[test]
    fn ccc_hand_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((lin_ccc(&x, &x, 50, 0).unwrap().ccc - 1.0).abs() < 1e-15);
        let c = 0.7;
        let y: Vec<f64> = x.iter().map(|v| v + c).collect();
        let s2 = 2.0; // population variance of 1..5
        let expected = 2.0 * s2 / (2.0 * s2 + c * c);
        assert!((lin_ccc(&x, &y, 50, 0).unwrap().ccc - expected).abs() < 1e-14);
        assert!(lin_ccc(&[1.0; 4], &[2.0; 4], 10, 0).is_err());
    }

    #[test]
    fn ccc_uncorrelated_large_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..400).map(|_| nrm.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..400).map(|_| nrm.sample(&mut rng)).collect();
        let r = lin_ccc(&x, &y, 2000, 9).unwrap();
        assert!(r.ci_lo <= 0.0 && 0.0 <= r.ci_hi, "{r:?}");
        assert!(r.ccc.abs() < 0.15);
    }

    #[test]
    fn ols_exact_fits() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let id = ols_loglog(&x, &x).unwrap();
        assert!((id.a).abs() < 1e-12 && (id.b - 1.0).abs() < 1e-12);
        assert_eq!((id.f, id.p), (0.0, 1.0));
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v).collect();
        let off = ols_loglog(&x, &y).unwrap();
        assert!((off.a - 1.0).abs() < 1e-12 && (off.b - 2.0).abs() < 1e-12);
        assert_eq!((off.f, off.p), (f64::INFINITY, 0.0));
        assert!(ols_loglog(&[2.0; 4], &x).is_err());
    }

    /// Joint F from explicit `(X^T X)^-1`, with the closed-form F(2, m) tail.
    fn normal_equations_oracle(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
        let n = x.len() as f64;
        let (s1, sx, sxx) = (n, x.iter().sum::<f64>(), x.iter().map(|v| v * v).sum::<f64>());
        let (sy, sxy) = (y.iter().sum::<f64>(), x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>());
        let det = s1 * sxx - sx * sx;
        let inv = [[sxx / det, -sx / det], [-sx / det, s1 / det]];
        let a = inv[0][0] * sy + inv[0][1] * sxy;
        let b = inv[1][0] * sy + inv[1][1] * sxy;
        let rss: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
        let s2 = rss / (n - 2.0);
        let d = [a, b - 1.0];
        // (R (X^T X)^-1 R^T)^-1 = X^T X for R = I
        let xtx = [[s1, sx], [sx, sxx]];
        let mut q = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                q += d[i] * xtx[i][j] * d[j];
            }
        }
        let f = q / 2.0 / s2;
        let m = n - 2.0;
        (a, b, f, (1.0 + 2.0 * f / m).powf(-m / 2.0))
    }

    #[test]
    fn ols_joint_f_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let nrm = Normal::new(0.0, 0.1).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..11).map(|i| 3.0 + 0.2 * i as f64).collect();
            let y: Vec<f64> = x.iter().map(|v| v + nrm.sample(&mut rng)).collect();
            let fit = ols_loglog(&x, &y).unwrap();
            let (a, b, f, p) = normal_equations_oracle(&x, &y);
            assert!((fit.a - a).abs() < 1e-8 && (fit.b - b).abs() < 1e-8);
            assert!((fit.f - f).abs() <= 1e-8 * f.max(1.0), "{} vs {f}", fit.f);
            assert!((fit.p - p).abs() < 1e-8, "{} vs {p}", fit.p);
        }
    }

    fn brute_wilcoxon_p(r: &[f64]) -> f64 {
        let nz: Vec<f64> = r.iter().copied().filter(|&v| v != 0.0).collect();
        let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
        let ranks = doubled_ranks(&abs);
        let obs: u64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, k)| *k).sum();
        let n = nz.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            le += (w <= obs) as u64;
            ge += (w >= obs) as u64;
        }
        ((2 * le.min(ge)) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn wilcoxon_hand_cases() {
        assert_eq!(wilcoxon_signed_rank(&[0.3, -0.3]).unwrap().p, 1.0);
        let pos = wilcoxon_signed_rank(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(pos.p, 0.031_25);
        let zero = wilcoxon_signed_rank(&[0.0, 0.0]).unwrap();
        assert_eq!((zero.p, zero.median), (1.0, 0.0));
        let r = [0.4, -1.1, 2.5, 0.7, -0.2];
        assert_eq!(wilcoxon_signed_rank(&r).unwrap().p, brute_wilcoxon_p(&r));
    }

    #[test]
    fn wilcoxon_dp_matches_brute_force_up_to_12() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let n = 1 + trial % 12;
            // Rounded values so ties and zeros occur.
            let r: Vec<f64> = (0..n).map(|_| ((rng.random::<f64>() - 0.4) * 8.0).round() / 4.0).collect();
            if r.iter().all(|&v| v == 0.0) {
                continue;
            }
            assert_eq!(wilcoxon_signed_rank(&r).unwrap().p, brute_wilcoxon_p(&r), "{r:?}");
        }
    }

    #[test]
    fn wilcoxon_normal_branch_is_symmetric() {
        let r: Vec<f64> = (1..=30).map(|i| if i % 2 == 0 { i as f64 } else { -(i as f64) }).collect();
        let w = wilcoxon_signed_rank(&r).unwrap();
        assert!(!w.exact);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert!((wilcoxon_signed_rank(&neg).unwrap().p - w.p).abs() < 1e-15);
        assert!(w.p > 0.5);
    }

    #[test]
    fn holm_hand_case() {
        assert_eq!(holm_adjust(&[0.01, 0.04]), vec![0.02, 0.04]);
        assert_eq!(holm_adjust(&[0.04, 0.01]), vec![0.04, 0.02]);
        assert_eq!(holm_adjust(&[0.3]), vec![0.3]);
        assert_eq!(holm_adjust(&[0.5, 0.6, 0.01]), vec![1.0, 1.0, 0.03]);
    }

    fn sample(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>() * 2.0).collect();
        (x, y)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn correlations_and_p_values_in_range(seed in 0u64..10_000, n in 3usize..14) {
            let (x, y) = sample(seed, n);
            let s = spearman(&x, &y, 50, seed).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s.rho));
            prop_assert!((0.0..=1.0).contains(&s.p_analytic));
            prop_assert!(s.p_perm >= 1.0 / 51.0 && s.p_perm <= 1.0);
            let k = kendall(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&k.tau) && (0.0..=1.0).contains(&k.p));
            let c = lin_ccc(&x, &y, 20, seed).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c.ccc));
            let c2 = lin_ccc(&y, &x, 20, seed).unwrap();
            prop_assert!((c.ccc - c2.ccc).abs() < 1e-12);
            let f = ols_loglog(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&f.p));
        }

        #[test]
        fn rank_tests_ignore_monotone_transforms(seed in 0u64..10_000, n in 3usize..10) {
            let (x, y) = sample(seed, n);
            let tx: Vec<f64> = x.iter().map(|v| (v * 0.7).exp() + 3.0).collect();
            let ty: Vec<f64> = y.iter().map(|v| v * v * v).collect();
            let a = spearman(&x, &y, 30, 1).unwrap();
            let b = spearman(&tx, &ty, 30, 1).unwrap();
            prop_assert!((a.rho - b.rho).abs() < 1e-12);
            prop_assert_eq!(a.p_perm, b.p_perm);
            prop_assert_eq!(kendall(&x, &y).unwrap(), kendall(&tx, &ty).unwrap());
        }

        #[test]
        fn ols_f_ignores_row_order(seed in 0u64..10_000, n in 4usize..12) {
            let (x, y) = sample(seed, n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let px: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let py: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let a = ols_loglog(&x, &y).unwrap();
            let b = ols_loglog(&px, &py).unwrap();
            prop_assert!((a.f - b.f).abs() <= 1e-9 * a.f.abs().max(1.0));
        }

        #[test]
        fn holm_is_monotone(ps in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let adj = holm_adjust(&ps);
            for i in 0..ps.len() {
                prop_assert!(adj[i] >= ps[i]);
                for j in 0..ps.len() {
                    if ps[i] < ps[j] {
                        prop_assert!(adj[i] <= adj[j]);
                    }
                }
            }
        }
    }
}

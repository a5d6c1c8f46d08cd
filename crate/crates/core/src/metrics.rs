//! Tail and dependence metrics for comparing generated samples with data or
//! with an analytic ground truth.

use serde::{Deserialize, Serialize};

use crate::data::{log1p_columns, Marginal};
use crate::grad::Tensor;
use crate::{Error, Result};

/// Reference distribution for the univariate metrics.
#[derive(Debug, Clone, Copy)]
pub enum Truth<'a> {
    Analytic(&'a Marginal),
    Samples(&'a [f64]),
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Type-7 empirical quantile (linear interpolation between order
/// statistics) of already sorted data.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], level: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("quantile of an empty sample"));
    }
    check_level(level)?;
    Ok(quantile_sorted(&sorted(x), level))
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("level must be in (0, 1), got {level}")))
    }
}

fn true_quantile(truth: Truth<'_>, level: f64) -> Result<f64> {
    match truth {
        Truth::Analytic(m) => m.quantile(level),
        Truth::Samples(s) => quantile(s, level),
    }
}

/// Number of entries of `sorted` that are `<= x`.
fn count_le(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|&v| v <= x)
}

/// Kolmogorov-Smirnov distance between the tails above the true
/// `q`-quantile, each renormalised to a conditional CDF. Points equal to the
/// threshold belong to the tail. `None` when no generated value reaches the
/// threshold.
pub fn ks_tail(generated: &[f64], truth: Truth<'_>, q: f64) -> Result<Option<f64>> {
    check_level(q)?;
    let xq = true_quantile(truth, q)?;
    let tail_g: Vec<f64> = sorted(generated).into_iter().filter(|&v| v >= xq).collect();
    if tail_g.is_empty() {
        return Ok(None);
    }
    let ng = tail_g.len() as f64;
    let mut sup: f64 = 0.0;
    match truth {
        Truth::Analytic(m) => {
            let base = m.cdf(xq);
            let mass = 1.0 - base;
            let f_true = |x: f64| ((m.cdf(x) - base) / mass).clamp(0.0, 1.0);
            let mut i = 0;
            while i < tail_g.len() {
                let x = tail_g[i];
                let mut j = i;
                while j < tail_g.len() && tail_g[j] == x {
                    j += 1;
                }
                let ft = f_true(x);
                sup = sup.max((i as f64 / ng - ft).abs()).max((j as f64 / ng - ft).abs());
                i = j;
            }
        }
        Truth::Samples(s) => {
            let tail_t: Vec<f64> = sorted(s).into_iter().filter(|&v| v >= xq).collect();
            let nt = tail_t.len() as f64;
            for &x in tail_g.iter().chain(&tail_t) {
                let fg = count_le(&tail_g, x) as f64 / ng;
                let ft = count_le(&tail_t, x) as f64 / nt;
                sup = sup.max((fg - ft).abs());
            }
        }
    }
    Ok(Some(sup.min(1.0)))
}

/// `|Q_gen - Q_true| / Q_true` at `level`.
pub fn q_rel_error(generated: &[f64], truth: Truth<'_>, level: f64) -> Result<f64> {
    let q_gen = quantile(generated, level)?;
    let q_true = true_quantile(truth, level)?;
    if q_true == 0.0 {
        return Err(Error::invalid("true quantile is zero; relative error undefined"));
    }
    Ok((q_gen - q_true).abs() / q_true.abs())
}

fn check_same_width(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "tables have {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Pearson correlation matrix (row-major `D x D`).
pub fn pearson(values: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = values.shape();
    if n < 2 {
        return Err(Error::invalid("correlation needs at least two rows"));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(values.row_slice(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = values.row_slice(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        if cov[i * d + i] <= 0.0 {
            return Err(Error::Data(format!("column {i} has zero variance")));
        }
    }
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        c[i * d + i] = 1.0;
        for j in i + 1..d {
            let r = cov[i * d + j] / (cov[i * d + i] * cov[j * d + j]).sqrt();
            c[i * d + j] = r;
            c[j * d + i] = r;
        }
    }
    Ok(c)
}

/// Frobenius distance between Pearson matrices of the log1p tables.
pub fn corr_err(real: &Tensor, generated: &Tensor) -> Result<f64> {
    check_same_width(real, generated)?;
    let a = pearson(&log1p_columns(real))?;
    let b = pearson(&log1p_columns(generated))?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

fn tie_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as u64;
        total += t * (t - 1) / 2;
        i = j;
    }
    total
}

/// Sorts `v` and returns the number of inversions removed.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b in `O(n log n)`. Returns 0 when either variable is
/// constant.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape("kendall_tau: lengths differ".into()));
    }
    let n = x.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let n1 = tie_pairs(&xs);
    let mut n3 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && xs[j] == xs[i] {
            j += 1;
        }
        n3 += tie_pairs(&ys[i..j]);
        i = j;
    }
    let swaps = merge_count(&mut ys, &mut Vec::with_capacity(n));
    let n2 = tie_pairs(&ys);
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let num = n0 as i128 - n1 as i128 - n2 as i128 + n3 as i128 - 2 * swaps as i128;
    Ok(num as f64 / denom)
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.cols())
        .map(|j| (0..t.rows()).map(|r| t.get(r, j)).collect())
        .collect()
}

fn pairs(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(move |i| (i + 1..d).map(move |j| (i, j)))
}

/// Pairwise Kendall tau matrix (row-major `D x D`, unit diagonal).
pub fn kendall_matrix(t: &Tensor) -> Result<Vec<f64>> {
    let cols = columns(t);
    let d = cols.len();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    for (i, j) in pairs(d) {
        let tau = kendall_tau(&cols[i], &cols[j])?;
        m[i * d + j] = tau;
        m[j * d + i] = tau;
    }
    Ok(m)
}

/// Mean absolute difference of pairwise Kendall tau.
pub fn tau_err(real: &Tensor, generated: &Tensor) -> Result<f64> {
    check_same_width(real, generated)?;
    let d = real.cols();
    if d < 2 {
        return Err(Error::invalid("tau_err needs at least two dimensions"));
    }
    let a = kendall_matrix(real)?;
    let b = kendall_matrix(generated)?;
    let total: f64 = pairs(d).map(|(i, j)| (a[i * d + j] - b[i * d + j]).abs()).sum();
    Ok(total * 2.0 / (d * (d - 1)) as f64)
}

/// Where the exceedance thresholds for the generated table come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Thresholds {
    /// Both tables use quantiles of the real data.
    #[default]
    Real,
    /// Each table uses its own marginal quantiles.
    Own,
}

/// Per-column type-7 quantiles at level `q`.
pub fn marginal_thresholds(t: &Tensor, q: f64) -> Result<Vec<f64>> {
    check_level(q)?;
    if t.rows() == 0 {
        return Err(Error::invalid("thresholds of an empty table"));
    }
    Ok(columns(t)
        .iter()
        .map(|c| quantile_sorted(&sorted(c), q))
        .collect())
}

/// `P(x_i > t_i and x_j > t_j)` for every pair, row-major `D x D`.
pub fn coexceedance(t: &Tensor, thresholds: &[f64]) -> Vec<f64> {
    let d = t.cols();
    let mut m = vec![0.0; d * d];
    let mut over = vec![false; d];
    for r in 0..t.rows() {
        for (o, (v, th)) in over.iter_mut().zip(t.row_slice(r).iter().zip(thresholds)) {
            *o = v > th;
        }
        for (i, j) in pairs(d) {
            if over[i] && over[j] {
                m[i * d + j] += 1.0;
            }
        }
    }
    let n = t.rows() as f64;
    for (i, j) in pairs(d) {
        m[i * d + j] /= n;
        m[j * d + i] = m[i * d + j];
    }
    m
}

/// Mean absolute pairwise difference in tail co-exceedance at level `q`.
pub fn coex_err(real: &Tensor, generated: &Tensor, q: f64, mode: Thresholds) -> Result<f64> {
    check_same_width(real, generated)?;
    let d = real.cols();
    if d < 2 {
        return Err(Error::invalid("coex_err needs at least two dimensions"));
    }
    let th_real = marginal_thresholds(real, q)?;
    let th_gen = match mode {
        Thresholds::Real => th_real.clone(),
        Thresholds::Own => marginal_thresholds(generated, q)?,
    };
    let a = coexceedance(real, &th_real);
    let b = coexceedance(generated, &th_gen);
    let total: f64 = pairs(d).map(|(i, j)| (a[i * d + j] - b[i * d + j]).abs()).sum();
    Ok(total * 2.0 / (d * (d - 1)) as f64)
}

/// `(x, P(X > x))` at each distinct sample value, with the survival
/// fraction counting strictly greater samples.
pub fn empirical_ccdf(samples: &[f64]) -> Vec<(f64, f64)> {
    let s = sorted(samples);
    let n = s.len() as f64;
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        out.push((s[i], (s.len() - j) as f64 / n));
        i = j;
    }
    out
}

pub fn ccdf_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("x,survival\n");
    for &(x, p) in points {
        s.push_str(&crate::fmt::f64_17(x));
        s.push(',');
        s.push_str(&crate::fmt::f64_17(p));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoexEntry {
    pub q: f64,
    pub err: f64,
}

/// Metrics for one generated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    /// Per dimension; `None` when no generated value reached the threshold.
    pub ks_tail: Vec<Option<f64>>,
    pub q99_rel_err: Vec<f64>,
    pub corr_err: Option<f64>,
    pub tau_err: Option<f64>,
    pub coex_err: Vec<CoexEntry>,
    pub n_reference: usize,
    pub n_generated: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Mean and sample standard deviation; `None` for an empty input.
pub fn mean_sd(values: &[f64]) -> Option<MeanSd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanSd {
        mean,
        sd,
        count: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_tau() {
        let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ccdf_counts() {
        let p = empirical_ccdf(&[3.0, 1.0, 2.0, 2.0]);
        assert_eq!(p, vec![(1.0, 0.75), (2.0, 0.25), (3.0, 0.0)]);
    }

    #[test]
    fn corr_err_off_diagonal() {
        // C_gen with off-diagonal 0.5 against identity.
        let a = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let real = Tensor::from_vec(4, 2, a.to_vec()).unwrap();
        assert!(corr_err(&real, &real).unwrap() == 0.0);
    }

    #[test]
    fn degenerate_generation() {
        let p = Marginal::Pareto { alpha: 2.4, xm: 1.0 };
        let e = q_rel_error(&[0.0; 50], Truth::Analytic(&p), 0.99).unwrap();
        assert_eq!(e, 1.0);
        assert_eq!(ks_tail(&[0.0; 50], Truth::Analytic(&p), 0.95).unwrap(), None);
    }

    #[test]
    fn zero_variance_named() {
        let t = Tensor::from_vec(3, 2, vec![1.0, 1.0, 2.0, 1.0, 3.0, 1.0]).unwrap();
        let e = corr_err(&t, &t).unwrap_err();
        assert!(e.to_string().contains("column 1"));
    }
}

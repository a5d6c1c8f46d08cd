//! Synthetic heavy-tailed data with known ground truth, t-copula
//! construction, and CSV input/output.

use std::path::Path;

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::grad::Tensor;
use crate::{Error, Result};

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// A univariate positive distribution with closed-form CDF and quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Marginal {
    /// `F(x) = 1 - exp(-(x / scale)^shape)`.
    Weibull { shape: f64, scale: f64 },
    /// `F(x) = 1 - (xm / x)^alpha` for `x >= xm`.
    Pareto { alpha: f64, xm: f64 },
    /// `ln X ~ N(mu, sigma^2)`.
    Lognormal { mu: f64, sigma: f64 },
    /// Burr XII: `F(x) = 1 - (1 + x^c)^(-k)`.
    Burr { c: f64, k: f64 },
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        let params: &[(&str, f64)] = match self {
            Marginal::Weibull { shape, scale } => &[("shape", *shape), ("scale", *scale)],
            Marginal::Pareto { alpha, xm } => &[("alpha", *alpha), ("xm", *xm)],
            Marginal::Lognormal { sigma, .. } => &[("sigma", *sigma)],
            Marginal::Burr { c, k } => &[("c", *c), ("k", *k)],
        };
        for (name, v) in params {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::invalid(format!("parameter must be positive: {name} = {v}")));
            }
        }
        if let Marginal::Lognormal { mu, .. } = self {
            if !mu.is_finite() {
                return Err(Error::invalid(format!("parameter must be finite: mu = {mu}")));
            }
        }
        Ok(())
    }

    /// Parses `family:p1,p2` with parameters in declaration order, e.g.
    /// `pareto:2.4,1.0`.
    pub fn parse(s: &str) -> Result<Self> {
        let (family, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("expected family:p1,p2, got '{s}'")))?;
        let p: Vec<f64> = rest
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad number '{t}' in '{s}'")))
            })
            .collect::<Result<_>>()?;
        if p.len() != 2 {
            return Err(Error::invalid(format!("'{s}' needs exactly two parameters")));
        }
        let m = Self::from_family(family.trim(), p[0], p[1])?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_family(family: &str, a: f64, b: f64) -> Result<Self> {
        Ok(match family {
            "weibull" => Marginal::Weibull { shape: a, scale: b },
            "pareto" => Marginal::Pareto { alpha: a, xm: b },
            "lognormal" => Marginal::Lognormal { mu: a, sigma: b },
            "burr" => Marginal::Burr { c: a, k: b },
            _ => return Err(Error::invalid(format!("unknown family '{family}'"))),
        })
    }

    pub fn family(&self) -> &'static str {
        match self {
            Marginal::Weibull { .. } => "weibull",
            Marginal::Pareto { .. } => "pareto",
            Marginal::Lognormal { .. } => "lognormal",
            Marginal::Burr { .. } => "burr",
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        1.0 - self.ccdf(x)
    }

    pub fn ccdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        match *self {
            Marginal::Weibull { shape, scale } => (-(x / scale).powf(shape)).exp(),
            Marginal::Pareto { alpha, xm } => {
                if x <= xm {
                    1.0
                } else {
                    (xm / x).powf(alpha)
                }
            }
            Marginal::Lognormal { mu, sigma } => norm_cdf(-(x.ln() - mu) / sigma),
            Marginal::Burr { c, k } => (-k * x.powf(c).ln_1p()).exp(),
        }
    }

    /// `F^{-1}(q)` for `q` in `(0, 1)`.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::invalid(format!("quantile level must be in (0, 1), got {q}")));
        }
        Ok(self.lower(q))
    }

    fn lower(&self, q: f64) -> f64 {
        let neg_log_surv = -(-q).ln_1p();
        match *self {
            Marginal::Weibull { shape, scale } => scale * neg_log_surv.powf(1.0 / shape),
            Marginal::Pareto { alpha, xm } => xm * (neg_log_surv / alpha).exp(),
            Marginal::Lognormal { mu, sigma } => (mu + sigma * norm_quantile(q)).exp(),
            Marginal::Burr { c, k } => (neg_log_surv / k).exp_m1().powf(1.0 / c),
        }
    }

    /// Value exceeded with probability `s`; accurate for tiny `s`.
    pub fn quantile_upper(&self, s: f64) -> Result<f64> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::invalid(format!("survival level must be in (0, 1), got {s}")));
        }
        Ok(self.upper(s))
    }

    fn upper(&self, s: f64) -> f64 {
        match *self {
            Marginal::Weibull { shape, scale } => scale * (-s.ln()).powf(1.0 / shape),
            Marginal::Pareto { alpha, xm } => xm * s.powf(-1.0 / alpha),
            Marginal::Lognormal { mu, sigma } => (mu - sigma * norm_quantile(s)).exp(),
            Marginal::Burr { c, k } => (-s.ln() / k).exp_m1().powf(1.0 / c),
        }
    }

    /// Inverse-CDF draw from a uniform `u` in `(0, 1)`.
    pub fn from_uniform(&self, u: f64) -> f64 {
        match *self {
            Marginal::Weibull { shape, scale } => scale * (-u.ln()).powf(1.0 / shape),
            Marginal::Pareto { alpha, xm } => xm * u.powf(-1.0 / alpha),
            Marginal::Lognormal { mu, sigma } => (mu + sigma * norm_quantile(u)).exp(),
            Marginal::Burr { c, k } => (-(-u).ln_1p() / k).exp_m1().powf(1.0 / c),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.from_uniform(rng.sample(Open01))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    /// Row-major `D x D` correlation matrix.
    pub correlation: Vec<f64>,
    pub nu: f64,
    pub marginals: Vec<Marginal>,
    /// Pairs constructed to be independent; their correlation must be zero.
    pub independent_pairs: Vec<(usize, usize)>,
}

impl CopulaSpec {
    /// The declared 5-dimensional benchmark: dimensions {0, 2, 3} and {1, 4}
    /// form two dependent blocks, so dimensions 0 and 1 are independent.
    pub fn benchmark() -> Self {
        let mut c = DMatrix::<f64>::identity(5, 5);
        for &(i, j, r) in &[(0, 2, 0.7), (0, 3, 0.5), (2, 3, 0.6), (1, 4, -0.6)] {
            c[(i, j)] = r;
            c[(j, i)] = r;
        }
        Self {
            correlation: c.transpose().as_slice().to_vec(),
            nu: 4.0,
            marginals: vec![
                Marginal::Pareto { alpha: 2.4, xm: 1.0 },
                Marginal::Weibull { shape: 0.8, scale: 1.0 },
                Marginal::Lognormal { mu: 0.0, sigma: 1.0 },
                Marginal::Burr { c: 2.0, k: 1.5 },
                Marginal::Weibull { shape: 1.5, scale: 2.0 },
            ],
            independent_pairs: vec![(0, 1)],
        }
    }

    pub fn dims(&self) -> usize {
        self.marginals.len()
    }

    fn matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dims();
        if d == 0 || self.correlation.len() != d * d {
            return Err(Error::invalid(format!(
                "correlation needs {} entries for {d} marginals",
                d * d
            )));
        }
        Ok(DMatrix::from_row_slice(d, d, &self.correlation))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(Error::invalid(format!("parameter must be positive: nu = {}", self.nu)));
        }
        for m in &self.marginals {
            m.validate()?;
        }
        let c = self.matrix()?;
        let d = self.dims();
        for i in 0..d {
            if (c[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::invalid("correlation diagonal must be 1"));
            }
            for j in 0..d {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-12 || c[(i, j)].abs() > 1.0 {
                    return Err(Error::invalid("correlation must be symmetric with entries in [-1, 1]"));
                }
            }
        }
        for &(i, j) in &self.independent_pairs {
            if i >= d || j >= d || i == j {
                return Err(Error::invalid(format!("bad independent pair ({i}, {j})")));
            }
            if c[(i, j)] != 0.0 {
                return Err(Error::invalid(format!("independent pair ({i}, {j}) has nonzero correlation")));
            }
        }
        if c.cholesky().is_none() {
            return Err(Error::invalid("correlation matrix is not positive definite"));
        }
        Ok(())
    }

    /// Connected components of the nonzero-correlation graph; each gets its
    /// own chi-square mixing draw so that zero correlation across
    /// components means genuine independence.
    fn components(&self) -> Vec<usize> {
        let d = self.dims();
        let c = &self.correlation;
        let mut label: Vec<usize> = (0..d).collect();
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..d {
                for j in 0..d {
                    if c[i * d + j] != 0.0 && label[j] > label[i] {
                        label[j] = label[i];
                        changed = true;
                    }
                }
            }
        }
        label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Marginal { spec: Marginal, n: usize, seed: u64 },
    Copula { spec: CopulaSpec, n: usize, seed: u64 },
    File { path: String },
    Derived { note: String },
}

/// `n x D` table of finite non-negative values with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub values: Tensor,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(columns: Vec<String>, values: Tensor, provenance: Provenance) -> Result<Self> {
        if columns.len() != values.cols() {
            return Err(Error::Shape("column names do not match table width".into()));
        }
        if let Some(i) = values.data().iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Data(format!(
                "entry at row {}, column {} is not a finite non-negative value",
                i / values.cols().max(1),
                i % values.cols().max(1)
            )));
        }
        Ok(Self {
            columns,
            values,
            provenance,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dims(&self) -> usize {
        self.values.cols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.values.get(r, j)).collect()
    }

    /// Keeps only column `j`.
    pub fn select(&self, j: usize) -> Result<Dataset> {
        if j >= self.dims() {
            return Err(Error::invalid(format!("column {j} out of range")));
        }
        Dataset::new(
            vec![self.columns[j].clone()],
            Tensor::from_vec(self.rows(), 1, self.column(j))?,
            self.provenance.clone(),
        )
    }

    /// Keeps the first `k` columns.
    pub fn leading(&self, k: usize) -> Result<Dataset> {
        if k == 0 || k > self.dims() {
            return Err(Error::invalid(format!(
                "cannot keep {k} of {} columns",
                self.dims()
            )));
        }
        let mut v = Vec::with_capacity(self.rows() * k);
        for r in 0..self.rows() {
            v.extend_from_slice(&self.values.row_slice(r)[..k]);
        }
        Dataset::new(
            self.columns[..k].to_vec(),
            Tensor::from_vec(self.rows(), k, v)?,
            self.provenance.clone(),
        )
    }
}

fn default_columns(d: usize) -> Vec<String> {
    if d == 1 {
        vec!["x".into()]
    } else {
        (0..d).map(|j| format!("x{j}")).collect()
    }
}

/// `n` inverse-CDF draws from `spec`.
pub fn gen_marginal(spec: &Marginal, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..n).map(|_| spec.sample(&mut rng)).collect();
    Dataset::new(
        default_columns(1),
        Tensor::from_vec(n, 1, v)?,
        Provenance::Marginal {
            spec: *spec,
            n,
            seed,
        },
    )
}

/// `n` rows from a Student-t copula with the given marginals.
pub fn gen_t_copula(spec: &CopulaSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let d = spec.dims();
    let chol = spec
        .matrix()?
        .cholesky()
        .ok_or_else(|| Error::invalid("correlation matrix is not positive definite"))?;
    let l = chol.l();
    let comp = spec.components();
    let n_comp = comp.iter().max().map_or(0, |m| m + 1);
    let t = StudentsT::new(0.0, 1.0, spec.nu).map_err(|e| Error::invalid(e.to_string()))?;
    let chi = ChiSquared::new(spec.nu).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut out = Vec::with_capacity(n * d);
    let mut g = vec![0.0; d];
    let mut mix = vec![0.0; n_comp];
    for _ in 0..n {
        for gi in g.iter_mut() {
            *gi = rng.sample(StandardNormal);
        }
        for (c, w) in mix.iter_mut().enumerate() {
            *w = if comp.contains(&c) {
                (rng.sample(chi) / spec.nu).sqrt()
            } else {
                0.0
            };
        }
        for i in 0..d {
            let y: f64 = (0..=i).map(|k| l[(i, k)] * g[k]).sum();
            let ti = y / mix[comp[i]];
            // Map through whichever tail keeps precision.
            let m = &spec.marginals[i];
            let x = if ti > 0.0 {
                let s = t.cdf(-ti);
                if s > 0.0 {
                    m.upper(s)
                } else {
                    m.upper(f64::MIN_POSITIVE)
                }
            } else {
                m.lower(t.cdf(ti).clamp(f64::MIN_POSITIVE, 0.5))
            };
            out.push(x);
        }
    }
    Dataset::new(
        default_columns(d),
        Tensor::from_vec(n, d, out)?,
        Provenance::Copula {
            spec: spec.clone(),
            n,
            seed,
        },
    )
}

/// Reads a headed numeric CSV.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let shown = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(std::fs::File::open(path).map_err(|e| Error::Data(format!("{shown}: {e}")))?);
    let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if columns.is_empty() || columns.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{shown}: missing header row")));
    }
    let d = columns.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != d {
            return Err(Error::Cell {
                path: path.to_path_buf(),
                row,
                column: columns[rec.len().min(d - 1)].clone(),
                message: format!("expected {d} fields, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let cell_err = |message: String| Error::Cell {
                path: path.to_path_buf(),
                row,
                column: columns[c].clone(),
                message,
            };
            let v: f64 = cell
                .parse()
                .map_err(|_| cell_err(format!("'{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(cell_err(format!("'{cell}' is not finite")));
            }
            if v < 0.0 {
                return Err(cell_err(format!("negative value {cell}")));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{shown}: no data rows")));
    }
    Dataset::new(
        columns,
        Tensor::from_vec(rows, d, values)?,
        Provenance::File { path: shown },
    )
}

/// Writes `columns` and `values` as CSV with 17 significant digits.
pub fn write_table(path: &Path, columns: &[String], values: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_path(path)?;
    w.write_record(columns)?;
    let mut buf = Vec::with_capacity(values.cols());
    for r in 0..values.rows() {
        buf.clear();
        buf.extend(values.row_slice(r).iter().map(|&v| crate::fmt::f64_17(v)));
        w.write_record(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_table(path, &dataset.columns, &dataset.values)
}

/// Elementwise `ln(1 + x)`.
pub fn log1p_columns(values: &Tensor) -> Tensor {
    values.map(f64::ln_1p)
}

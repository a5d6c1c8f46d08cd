//! Phase-type distributions.
//!
//! A phase-type (PH) law is the absorption time of a continuous-time Markov
//! chain with `m` transient states and one absorbing state. It is described by
//! an initial distribution `alpha` over the transient states and the
//! sub-generator `A` restricted to them; exit rates are `t = -A 1`.
//!
//! Two representations are provided: [`GeneralPH`] (dense `A`) and
//! [`CanonicalPH`], the series canonical form with bidiagonal generator and
//! non-decreasing rates used by the decoder. Both implement [`PhaseType`], so
//! density, distribution, moments and sampling are written once.
//!
//! All matrix exponentials are evaluated by uniformization, see
//! [`uniformize`].

mod canonical_grad;
mod json;
mod sample;
pub mod uniformize;

use nalgebra::DMatrix;

use crate::{Error, Result};

pub use canonical_grad::{canonical_log_pdf_fixed_terms, canonical_log_pdf_grad, LogPdfGrad};
pub use json::{canonical_from_json, canonical_to_json, general_from_json, general_to_json};
pub use sample::{sample, sample_multivariate, MAX_JUMPS};
pub use uniformize::{matexp_uniformized, poisson_weights, UniformizationConfig};

/// Returned by [`log_pdf`] when the density underflows to zero.
pub const LOG_PDF_FLOOR: f64 = -1e30;

const PROB_TOL: f64 = 1e-12;

/// Operations shared by both PH representations.
pub trait PhaseType {
    fn alpha(&self) -> &[f64];

    fn phases(&self) -> usize {
        self.alpha().len()
    }

    /// `-A_ii`, the total outflow rate of phase `i`.
    fn holding_rate(&self, i: usize) -> f64;

    /// `t_i`, the rate from phase `i` into absorption.
    fn exit_rate(&self, i: usize) -> f64;

    /// Transition rate `A_ij` between distinct transient phases.
    fn jump_rate(&self, i: usize, j: usize) -> f64;

    /// `out = v (I + A / rate)`.
    fn uniformized_step(&self, v: &[f64], rate: f64, out: &mut [f64]);

    /// Solve `(s I - A) y = b` for a column vector `y`.
    fn solve_shifted(&self, s: f64, b: &[f64]) -> Result<Vec<f64>>;

    fn uniformization_rate(&self) -> f64 {
        let r = (0..self.phases())
            .map(|i| self.holding_rate(i))
            .fold(0.0_f64, f64::max);
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    fn exit_rates(&self) -> Vec<f64> {
        (0..self.phases()).map(|i| self.exit_rate(i)).collect()
    }
}

/// PH distribution with a dense sub-generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralPH {
    alpha: Vec<f64>,
    a: DMatrix<f64>,
}

impl GeneralPH {
    pub fn new(alpha: Vec<f64>, a: DMatrix<f64>) -> Result<Self> {
        let m = alpha.len();
        if m == 0 {
            return Err(Error::invalid("PH needs at least one phase"));
        }
        if a.nrows() != m || a.ncols() != m {
            return Err(Error::Shape(format!(
                "alpha has {m} entries but A is {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        check_probability_vector(&alpha)?;
        validate_subgenerator(&a)?;
        Ok(Self { alpha, a })
    }

    pub fn from_rows(alpha: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("sub-generator rows must be square".into()));
        }
        let a = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
        Self::new(alpha, a)
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Reads a bidiagonal generator back into series canonical form.
    pub fn to_canonical(&self) -> Result<CanonicalPH> {
        let m = self.phases();
        let mut lambda = Vec::with_capacity(m);
        for i in 0..m {
            for j in 0..m {
                let v = self.a[(i, j)];
                let ok = if j == i {
                    true
                } else if j == i + 1 {
                    v == -self.a[(i, i)]
                } else {
                    v == 0.0
                };
                if !ok {
                    return Err(Error::invalid(format!(
                        "entry ({i},{j}) breaks series canonical structure"
                    )));
                }
            }
            lambda.push(-self.a[(i, i)]);
        }
        CanonicalPH::new(self.alpha.clone(), lambda)
    }
}

impl PhaseType for GeneralPH {
    fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    fn holding_rate(&self, i: usize) -> f64 {
        -self.a[(i, i)]
    }

    fn exit_rate(&self, i: usize) -> f64 {
        // Row sums are <= 0; clip round-off so t stays non-negative.
        (-self.a.row(i).sum()).max(0.0)
    }

    fn jump_rate(&self, i: usize, j: usize) -> f64 {
        self.a[(i, j)]
    }

    fn uniformized_step(&self, v: &[f64], rate: f64, out: &mut [f64]) {
        let m = self.phases();
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = v[j];
            for (i, &vi) in v.iter().enumerate().take(m) {
                acc += vi * self.a[(i, j)] / rate;
            }
            *o = acc;
        }
    }

    fn solve_shifted(&self, s: f64, b: &[f64]) -> Result<Vec<f64>> {
        let m = self.phases();
        let shifted = DMatrix::from_fn(m, m, |i, j| {
            let d = if i == j { s } else { 0.0 };
            d - self.a[(i, j)]
        });
        let rhs = nalgebra::DVector::from_column_slice(b);
        shifted
            .lu()
            .solve(&rhs)
            .map(|y| y.as_slice().to_vec())
            .ok_or_else(|| Error::Singular(format!("(sI - A) with s = {s}")))
    }
}

/// Series canonical PH: bidiagonal generator with `A_ii = -lambda_i`,
/// `A_{i,i+1} = lambda_i` and rates `0 < lambda_1 <= ... <= lambda_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalPH {
    alpha: Vec<f64>,
    lambda: Vec<f64>,
}

impl CanonicalPH {
    pub fn new(alpha: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("PH needs at least one phase"));
        }
        if alpha.len() != lambda.len() {
            return Err(Error::Shape(format!(
                "alpha has {} entries, lambda has {}",
                alpha.len(),
                lambda.len()
            )));
        }
        check_probability_vector(&alpha)?;
        check_rates(&lambda)?;
        Ok(Self { alpha, lambda })
    }

    /// Exponential law with the given rate.
    pub fn exponential(rate: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![rate])
    }

    /// Erlang law: `phases` exponential stages of a common rate.
    pub fn erlang(phases: usize, rate: f64) -> Result<Self> {
        let mut alpha = vec![0.0; phases];
        if let Some(a) = alpha.first_mut() {
            *a = 1.0;
        }
        Self::new(alpha, vec![rate; phases])
    }

    pub fn rates(&self) -> &[f64] {
        &self.lambda
    }

    pub fn expand(&self) -> GeneralPH {
        let m = self.phases();
        let mut a = DMatrix::zeros(m, m);
        for (i, &l) in self.lambda.iter().enumerate() {
            a[(i, i)] = -l;
            if i + 1 < m {
                a[(i, i + 1)] = l;
            }
        }
        GeneralPH {
            alpha: self.alpha.clone(),
            a,
        }
    }
}

impl PhaseType for CanonicalPH {
    fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    fn holding_rate(&self, i: usize) -> f64 {
        self.lambda[i]
    }

    fn exit_rate(&self, i: usize) -> f64 {
        if i + 1 == self.phases() {
            self.lambda[i]
        } else {
            0.0
        }
    }

    fn jump_rate(&self, i: usize, j: usize) -> f64 {
        if j == i + 1 {
            self.lambda[i]
        } else {
            0.0
        }
    }

    fn uniformized_step(&self, v: &[f64], rate: f64, out: &mut [f64]) {
        canonical_step(&self.lambda, v, rate, out);
    }

    fn solve_shifted(&self, s: f64, b: &[f64]) -> Result<Vec<f64>> {
        // (sI - A) is upper bidiagonal: diagonal s + l_i, superdiagonal -l_i.
        let m = self.phases();
        let mut y = vec![0.0; m];
        for i in (0..m).rev() {
            let d = s + self.lambda[i];
            if d == 0.0 {
                return Err(Error::Singular(format!("zero pivot at phase {i}")));
            }
            let next = if i + 1 < m { y[i + 1] } else { 0.0 };
            y[i] = (b[i] + self.lambda[i] * next) / d;
        }
        Ok(y)
    }
}

pub(crate) fn canonical_step(lambda: &[f64], v: &[f64], rate: f64, out: &mut [f64]) {
    let mut carry = 0.0;
    for i in 0..lambda.len() {
        let p = lambda[i] / rate;
        out[i] = v[i] * (1.0 - p) + carry;
        carry = v[i] * p;
    }
}

fn check_probability_vector(alpha: &[f64]) -> Result<()> {
    if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::invalid("initial probabilities must be finite and >= 0"));
    }
    let s: f64 = alpha.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::invalid(format!(
            "initial probabilities sum to {s}, expected 1"
        )));
    }
    Ok(())
}

fn check_rates(lambda: &[f64]) -> Result<()> {
    for (i, &l) in lambda.iter().enumerate() {
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::invalid(format!("rate {i} must be positive, got {l}")));
        }
        if i > 0 && l < lambda[i - 1] {
            return Err(Error::invalid(format!(
                "rates must be non-decreasing: lambda[{}] = {} > lambda[{i}] = {l}",
                i - 1,
                lambda[i - 1]
            )));
        }
    }
    Ok(())
}

pub(crate) fn validate_subgenerator(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape("sub-generator must be square".into()));
    }
    for i in 0..a.nrows() {
        let mut row = 0.0;
        for j in 0..a.ncols() {
            let v = a[(i, j)];
            if !v.is_finite() {
                return Err(Error::invalid(format!("A[{i},{j}] is not finite")));
            }
            if i == j && v >= 0.0 {
                return Err(Error::invalid(format!("A[{i},{i}] must be negative")));
            }
            if i != j && v < 0.0 {
                return Err(Error::invalid(format!("A[{i},{j}] must be non-negative")));
            }
            row += v;
        }
        if row > PROB_TOL {
            return Err(Error::invalid(format!("row {i} of A sums to {row} > 0")));
        }
    }
    Ok(())
}

fn check_x(x: f64) -> Result<()> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::invalid(format!("x must be finite and >= 0, got {x}")));
    }
    Ok(())
}

/// `alpha exp(A x) t`.
pub fn pdf<P: PhaseType + ?Sized>(ph: &P, x: f64, cfg: &UniformizationConfig) -> Result<f64> {
    check_x(x)?;
    let t = ph.exit_rates();
    uniformize::vector_series(ph, x, cfg, |v| dot(v, &t))
}

/// `alpha exp(A x) 1`, the probability that absorption happens after `x`.
pub fn ccdf<P: PhaseType + ?Sized>(ph: &P, x: f64, cfg: &UniformizationConfig) -> Result<f64> {
    check_x(x)?;
    let s = uniformize::vector_series(ph, x, cfg, |v| v.iter().sum())?;
    Ok(s.clamp(0.0, 1.0))
}

pub fn cdf<P: PhaseType + ?Sized>(ph: &P, x: f64, cfg: &UniformizationConfig) -> Result<f64> {
    Ok(1.0 - ccdf(ph, x, cfg)?)
}

/// Natural log of [`pdf`], or [`LOG_PDF_FLOOR`] when the density underflows.
pub fn log_pdf<P: PhaseType + ?Sized>(ph: &P, x: f64, cfg: &UniformizationConfig) -> Result<f64> {
    let f = pdf(ph, x, cfg)?;
    Ok(if f > 0.0 && f.is_finite() {
        f.ln()
    } else {
        LOG_PDF_FLOOR
    })
}

/// `E[X^k] = k! alpha (-A)^{-k} 1`, computed with `k` linear solves.
pub fn moment<P: PhaseType + ?Sized>(ph: &P, k: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("moment order must be >= 1"));
    }
    let mut y = vec![1.0; ph.phases()];
    let mut fact = 1.0;
    for j in 1..=k {
        y = ph.solve_shifted(0.0, &y)?;
        fact *= j as f64;
    }
    Ok(fact * dot(ph.alpha(), &y))
}

/// `alpha (s I - A)^{-1} t` for `s > 0`.
pub fn laplace<P: PhaseType + ?Sized>(ph: &P, s: f64) -> Result<f64> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::invalid(format!("Laplace argument must be > 0, got {s}")));
    }
    let y = ph.solve_shifted(s, &ph.exit_rates())?;
    Ok(dot(ph.alpha(), &y))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

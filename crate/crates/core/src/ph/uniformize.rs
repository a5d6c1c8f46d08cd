//! Uniformization: `exp(A x) = sum_k e^{-L x} (L x)^k / k! P^k` with
//! `P = I + A / L` and `L = max_i(-A_ii)`.
//!
//! The series is cut at the smallest `K` whose remaining Poisson mass is below
//! the configured tolerance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{validate_subgenerator, PhaseType};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformizationConfig {
    /// Bound on the Poisson tail mass left out of the series.
    pub tolerance: f64,
    /// Hard cap on the number of series terms.
    pub max_terms: usize,
}

impl Default for UniformizationConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_terms: 10_000,
        }
    }
}

impl UniformizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::invalid("uniformization tolerance must be in (0, 1)"));
        }
        if self.max_terms == 0 {
            return Err(Error::invalid("max_terms must be >= 1"));
        }
        Ok(())
    }
}

/// Poisson(`rate_x`) probabilities `w_0..=w_K`, `K` minimal such that
/// `1 - sum w_k < tolerance`.
///
/// Weights follow the log-space recurrence
/// `ln w_k = ln w_{k-1} + ln(rate_x) - ln k`, so no factorial is formed and
/// terms far left of the mode underflow harmlessly to zero.
pub fn poisson_weights(rate_x: f64, cfg: &UniformizationConfig) -> Result<Vec<f64>> {
    let mut w = Vec::new();
    let mut it = PoissonIter::new(rate_x, cfg)?;
    while let Some(wk) = it.next_weight()? {
        w.push(wk);
    }
    Ok(w)
}

/// Streaming form of [`poisson_weights`].
pub(crate) struct PoissonIter {
    log_rate: f64,
    log_w: f64,
    k: usize,
    mass: f64,
    comp: f64,
    tolerance: f64,
    max_terms: usize,
    rate_x: f64,
    fixed_terms: Option<usize>,
    done: bool,
}

impl PoissonIter {
    pub(crate) fn new(rate_x: f64, cfg: &UniformizationConfig) -> Result<Self> {
        cfg.validate()?;
        if !(rate_x.is_finite() && rate_x >= 0.0) {
            return Err(Error::invalid(format!("rate * x must be finite and >= 0, got {rate_x}")));
        }
        Ok(Self {
            log_rate: rate_x.ln(),
            log_w: -rate_x,
            k: 0,
            mass: 0.0,
            comp: 0.0,
            tolerance: cfg.tolerance,
            max_terms: cfg.max_terms,
            rate_x,
            fixed_terms: None,
            done: false,
        })
    }

    /// Exactly `terms` weights, ignoring the tolerance.
    pub(crate) fn fixed(rate_x: f64, terms: usize) -> Result<Self> {
        let cfg = UniformizationConfig {
            tolerance: 0.5,
            max_terms: terms.max(1),
        };
        let mut it = Self::new(rate_x, &cfg)?;
        it.fixed_terms = Some(terms);
        Ok(it)
    }

    /// Upper bound on the mass after the last emitted weight. Past the mode
    /// successive ratios `rate_x / (j + 1)` fall below `r = rate_x / k`, so the
    /// tail is at most `w r / (1 - r)`.
    fn tail_bound(&self) -> f64 {
        let r = self.rate_x / self.k as f64;
        if r < 1.0 {
            self.log_w.exp() * r / (1.0 - r)
        } else {
            f64::INFINITY
        }
    }

    /// Natural log of the next weight; finite even where the weight itself
    /// underflows.
    pub(crate) fn next_log_weight(&mut self) -> Result<Option<f64>> {
        Ok(self.next_weight()?.map(|_| self.log_w))
    }

    /// Next weight, or `None` once the tail mass is below tolerance.
    pub(crate) fn next_weight(&mut self) -> Result<Option<f64>> {
        if self.done {
            return Ok(None);
        }
        let stop = match self.fixed_terms {
            Some(n) => self.k >= n,
            None => self.k > 0 && (1.0 - (self.mass + self.comp) < self.tolerance || self.tail_bound() < self.tolerance),
        };
        if stop {
            self.done = true;
            return Ok(None);
        }
        if self.k >= self.max_terms {
            return Err(Error::TruncationCap {
                max_terms: self.max_terms,
                rate_x: self.rate_x,
            });
        }
        if self.k > 0 {
            self.log_w += self.log_rate - (self.k as f64).ln();
        }
        let w = if self.rate_x == 0.0 {
            if self.k == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.log_w.exp()
        };
        // Neumaier summation keeps the tail-mass test honest for long series.
        let t = self.mass + w;
        if self.mass.abs() >= w.abs() {
            self.comp += (self.mass - t) + w;
        } else {
            self.comp += (w - t) + self.mass;
        }
        self.mass = t;
        self.k += 1;
        Ok(Some(w))
    }
}

/// `exp(A x)` by uniformization.
///
/// Entries lie in `[0, 1]` and row sums are at most one.
pub fn matexp_uniformized(
    a: &DMatrix<f64>,
    x: f64,
    cfg: &UniformizationConfig,
) -> Result<DMatrix<f64>> {
    validate_subgenerator(a)?;
    if !(x.is_finite() && x >= 0.0) {
        return Err(Error::invalid(format!("x must be finite and >= 0, got {x}")));
    }
    let m = a.nrows();
    let rate = {
        let r = (0..m).map(|i| -a[(i, i)]).fold(0.0_f64, f64::max);
        if r > 0.0 {
            r
        } else {
            1.0
        }
    };
    let p = DMatrix::identity(m, m) + a / rate;
    let mut power = DMatrix::identity(m, m);
    let mut out = DMatrix::zeros(m, m);
    let mut weights = PoissonIter::new(rate * x, cfg)?;
    let mut first = true;
    while let Some(w) = weights.next_weight()? {
        if !first {
            power = &power * &p;
        }
        first = false;
        out += &power * w;
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Evaluates `sum_k w_k g(alpha P^k)` for a linear functional `g`.
///
/// Stops early, without approximation, when the transient mass `alpha P^k`
/// becomes identically zero.
pub(crate) fn vector_series<P, G>(ph: &P, x: f64, cfg: &UniformizationConfig, g: G) -> Result<f64>
where
    P: PhaseType + ?Sized,
    G: Fn(&[f64]) -> f64,
{
    let rate = ph.uniformization_rate();
    let mut weights = PoissonIter::new(rate * x, cfg)?;
    let mut v = ph.alpha().to_vec();
    let mut next = vec![0.0; v.len()];
    let mut acc = 0.0;
    let mut first = true;
    while let Some(w) = weights.next_weight()? {
        if !first {
            ph.uniformized_step(&v, rate, &mut next);
            std::mem::swap(&mut v, &mut next);
            if v.iter().all(|&p| p == 0.0) {
                break;
            }
        }
        first = false;
        acc += w * g(&v);
    }
    Ok(acc)
}

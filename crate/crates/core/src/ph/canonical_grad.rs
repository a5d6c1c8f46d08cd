//! Log-density of a series canonical PH together with its gradient.
//!
//! The forward value is the truncated uniformization series
//! `f(x) = l_m * sum_{k<=K} w_k(L x) [alpha P^k]_m` with `L = l_m`.
//! The gradient is the exact derivative of that finite sum with `K` held
//! fixed: reverse accumulation through the recurrence `v_{k+1} = v_k P`,
//! plus the dependence of the Poisson weights and of `P` on `L`.
//!
//! The reverse sweep needs `v_k` in reverse order; vectors are recomputed
//! from checkpoints every `ceil(sqrt(K))` steps so memory stays
//! `O(sqrt(K) m)` even for very long series.

use super::uniformize::{PoissonIter, UniformizationConfig};
use super::{canonical_step, LOG_PDF_FLOOR};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct LogPdfGrad {
    pub value: f64,
    /// d value / d alpha; empty when gradients were not requested.
    pub d_alpha: Vec<f64>,
    /// d value / d lambda; empty when gradients were not requested.
    pub d_lambda: Vec<f64>,
    /// Number of series terms actually summed.
    pub terms: usize,
}

/// `ln f(x)` for the canonical PH `(alpha, lambda)`, optionally with its
/// gradient.
///
/// Inputs are not validated here; callers guarantee a probability vector and
/// positive non-decreasing rates. When the density underflows the value is
/// [`LOG_PDF_FLOOR`] and the gradient is zero. Iterates and weights are
/// rescaled internally, so this happens only when the truncated series is
/// exactly zero.
pub fn canonical_log_pdf_grad(
    alpha: &[f64],
    lambda: &[f64],
    x: f64,
    cfg: &UniformizationConfig,
    want_grad: bool,
) -> Result<LogPdfGrad> {
    let rate = lambda[lambda.len() - 1];
    let poisson = PoissonIter::new(rate * x, cfg)?;
    evaluate(alpha, lambda, x, poisson, want_grad)
}

/// Same series cut at exactly `terms` terms; finite-difference checks use
/// this so both sides differentiate one fixed polynomial.
pub fn canonical_log_pdf_fixed_terms(
    alpha: &[f64],
    lambda: &[f64],
    x: f64,
    terms: usize,
    want_grad: bool,
) -> Result<LogPdfGrad> {
    let rate = lambda[lambda.len() - 1];
    evaluate(alpha, lambda, x, PoissonIter::fixed(rate * x, terms)?, want_grad)
}

fn evaluate(
    alpha: &[f64],
    lambda: &[f64],
    x: f64,
    mut poisson: PoissonIter,
    want_grad: bool,
) -> Result<LogPdfGrad> {
    let m = alpha.len();
    debug_assert_eq!(m, lambda.len());
    let last = m - 1;
    let rate = lambda[last];

    // The iterate is kept as `v_k * 2^(SHIFT * shifts[k])` and each term as
    // `exp(log_terms[k] - reference) * v[last]`, so the series is relative to
    // `exp(reference)` and neither factor leaves the f64 range.
    let mut log_terms = Vec::new();
    let mut shifts: Vec<u32> = Vec::new();
    let mut shift = 0u32;
    let mut exhausted: Option<usize> = None;
    let mut reference = f64::NEG_INFINITY;
    let mut v = alpha.to_vec();
    let mut next = vec![0.0; m];
    let mut series = 0.0;
    // d series / d rate through the Poisson weights only.
    let mut d_rate_w = 0.0;
    let mut checkpoints: Vec<Vec<f64>> = Vec::new();
    let seg = segment_len(rate * x);

    while let Some(log_w) = poisson.next_log_weight()? {
        let k = log_terms.len();
        if k > 0 {
            if exhausted.is_some_and(|z| k >= z + m) {
                break;
            }
            canonical_step(lambda, &v, rate, &mut next);
            std::mem::swap(&mut v, &mut next);
            if v.iter().all(|&p| p == 0.0) {
                // Exact zero only arises when tied rates make P nilpotent.
                // The value is complete, but the next m terms still carry
                // gradient.
                if !want_grad {
                    break;
                }
                exhausted.get_or_insert(k);
            } else {
                shift += renormalize(&mut v);
            }
        }
        if want_grad && k % seg == 0 {
            checkpoints.push(v.clone());
        }
        let lt = log_w - f64::from(shift) * LN_SCALE;
        if lt > reference {
            let r = (reference - lt).exp();
            series *= r;
            d_rate_w *= r;
            reference = lt;
        }
        let w = (lt - reference).exp();
        series += w * v[last];
        if want_grad {
            d_rate_w += w * (k as f64 / rate - x) * v[last];
        }
        log_terms.push(lt);
        shifts.push(shift);
    }

    let terms = log_terms.len();
    if !(series > 0.0 && series.is_finite()) {
        return Ok(LogPdfGrad {
            value: LOG_PDF_FLOOR,
            d_alpha: if want_grad { vec![0.0; m] } else { Vec::new() },
            d_lambda: if want_grad { vec![0.0; m] } else { Vec::new() },
            terms,
        });
    }
    let value = rate.ln() + series.ln() + reference;
    if !want_grad {
        return Ok(LogPdfGrad {
            value,
            d_alpha: Vec::new(),
            d_lambda: Vec::new(),
            terms,
        });
    }

    // Reverse sweep. `u` holds d series / d v_{k+1} while visiting step k,
    // in the scale of v_{k+1}.
    let weight = |k: usize| (log_terms[k] - reference).exp();
    let big_k = terms - 1;
    let mut u = vec![0.0; m];
    u[last] = weight(big_k);
    let mut g_diag = vec![0.0; m];
    let mut g_sup = vec![0.0; m];
    let mut buf: Vec<Vec<f64>> = Vec::with_capacity(seg);
    let mut u_next = vec![0.0; m];

    for s in (0..checkpoints.len()).rev() {
        let start = s * seg;
        let end = ((s + 1) * seg).min(big_k);
        if start >= end {
            continue;
        }
        buf.clear();
        buf.push(checkpoints[s].clone());
        for k in start + 1..end {
            let mut nv = vec![0.0; m];
            canonical_step(lambda, buf.last().unwrap(), rate, &mut nv);
            scale_up(&mut nv, shifts[k] - shifts[k - 1]);
            buf.push(nv);
        }
        for k in (start..end).rev() {
            // Bring u from the scale of v_{k+1} to that of v_k.
            scale_up(&mut u, shifts[k + 1] - shifts[k]);
            let vk = &buf[k - start];
            for i in 0..m {
                g_diag[i] += vk[i] * u[i];
                if i < last {
                    g_sup[i] += vk[i] * u[i + 1];
                }
            }
            // u_k = w_k e_last + u_{k+1} P^T
            for i in 0..m {
                let p = lambda[i] / rate;
                let mut acc = (1.0 - p) * u[i];
                if i < last {
                    acc += p * u[i + 1];
                }
                u_next[i] = acc;
            }
            u_next[last] += weight(k);
            std::mem::swap(&mut u, &mut u_next);
        }
    }
    // With a single term the loop above never runs and u must be w_0 e_last.
    let d_alpha_series = u;

    let mut d_lambda_series = vec![0.0; m];
    let mut d_rate = d_rate_w;
    for i in 0..m {
        let sup = if i < last { g_sup[i] } else { 0.0 };
        d_lambda_series[i] += (sup - g_diag[i]) / rate;
        d_rate += (g_diag[i] - sup) * lambda[i] / (rate * rate);
    }
    d_lambda_series[last] += d_rate;

    let inv = 1.0 / series;
    let d_alpha = d_alpha_series.iter().map(|g| g * inv).collect();
    let mut d_lambda: Vec<f64> = d_lambda_series.iter().map(|g| g * inv).collect();
    d_lambda[last] += 1.0 / rate;
    Ok(LogPdfGrad {
        value,
        d_alpha,
        d_lambda,
        terms,
    })
}

/// Iterates are multiplied by `2^SHIFT` whenever their largest entry drops
/// below `2^-SHIFT`. Powers of two keep the rescaling exact.
const SHIFT: i32 = 500;
const LN_SCALE: f64 = SHIFT as f64 * std::f64::consts::LN_2;

/// Rescales `v` until its largest entry is at least `2^-SHIFT`; returns the
/// number of rescalings. `v` must have a nonzero entry.
fn renormalize(v: &mut [f64]) -> u32 {
    let tiny = 2f64.powi(-SHIFT);
    let big = 2f64.powi(SHIFT);
    let mut n = 0;
    while v.iter().fold(0.0_f64, |a, &b| a.max(b)) < tiny {
        for p in v.iter_mut() {
            *p *= big;
        }
        n += 1;
    }
    n
}

fn scale_up(v: &mut [f64], times: u32) {
    let big = 2f64.powi(SHIFT);
    for _ in 0..times {
        for p in v.iter_mut() {
            *p *= big;
        }
    }
}

fn segment_len(rate_x: f64) -> usize {
    let expected = rate_x + 10.0 * rate_x.sqrt() + 10.0;
    (expected.sqrt().ceil() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ph::{log_pdf, CanonicalPH, PhaseType};

    fn cfg() -> UniformizationConfig {
        UniformizationConfig::default()
    }

    fn value(alpha: &[f64], lambda: &[f64], x: f64) -> f64 {
        canonical_log_pdf_grad(alpha, lambda, x, &cfg(), false)
            .unwrap()
            .value
    }

    fn fixed(alpha: &[f64], lambda: &[f64], x: f64, terms: usize) -> f64 {
        canonical_log_pdf_fixed_terms(alpha, lambda, x, terms, false)
            .unwrap()
            .value
    }

    #[test]
    fn matches_generic_log_pdf() {
        let ph = CanonicalPH::new(vec![0.2, 0.5, 0.3], vec![0.7, 1.1, 4.0]).unwrap();
        for &x in &[0.0, 0.01, 0.5, 2.0, 9.0, 40.0] {
            let a = value(ph.alpha(), ph.rates(), x);
            let b = log_pdf(&ph, x, &cfg()).unwrap();
            assert!((a - b).abs() < 1e-12, "x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn exponential_gradient_is_analytic() {
        // ln f = ln l - l x  =>  d/dl = 1/l - x
        let g = canonical_log_pdf_grad(&[1.0], &[2.0], 1.5, &cfg(), true).unwrap();
        assert!((g.value - (2f64.ln() - 3.0)).abs() < 1e-12);
        assert!((g.d_lambda[0] - (0.5 - 1.5)).abs() < 1e-9, "{:?}", g.d_lambda);
    }

    #[test]
    fn gradient_matches_finite_differences_on_long_series() {
        // Long enough that several checkpoint segments are exercised.
        let alpha = [0.1, 0.2, 0.3, 0.4];
        let lambda = [0.3, 0.9, 2.0, 6.0];
        let x = 30.0;
        let g = canonical_log_pdf_grad(&alpha, &lambda, x, &cfg(), true).unwrap();
        assert!(g.terms > 100);
        for i in 0..4 {
            let h = 1e-6 * lambda[i];
            let mut lp = lambda;
            let mut lm = lambda;
            lp[i] += h;
            lm[i] -= h;
            let fd = (fixed(&alpha, &lp, x, g.terms) - fixed(&alpha, &lm, x, g.terms)) / (2.0 * h);
            let rel = (fd - g.d_lambda[i]).abs() / g.d_lambda[i].abs().max(1e-3);
            assert!(rel < 1e-5, "lambda[{i}]: fd={fd} an={}", g.d_lambda[i]);
        }
        for i in 0..4 {
            let h = 1e-6;
            let mut ap = alpha;
            let mut am = alpha;
            ap[i] += h;
            am[i] -= h;
            let fd = (fixed(&ap, &lambda, x, g.terms) - fixed(&am, &lambda, x, g.terms)) / (2.0 * h);
            let rel = (fd - g.d_alpha[i]).abs() / g.d_alpha[i].abs().max(1e-3);
            assert!(rel < 1e-5, "alpha[{i}]: fd={fd} an={}", g.d_alpha[i]);
        }
    }

    #[test]
    fn far_tail_stays_exact_below_f64_range() {
        // Erlang-2(5) at x = 1e4: ln f = 2 ln 5 + ln x - 5x, far below ln(f64::MIN_POSITIVE).
        let cfg = UniformizationConfig {
            tolerance: 1e-8,
            max_terms: 1_000_000,
        };
        let x = 1e4;
        let g = canonical_log_pdf_grad(&[1.0, 0.0], &[5.0, 5.0], x, &cfg, true).unwrap();
        let want = 2.0 * 5f64.ln() + x.ln() - 5.0 * x;
        assert!((g.value - want).abs() < 1e-9 * want.abs(), "{} vs {want}", g.value);
        // Tied rates share d/dl ln(l^2 x e^{-l x}) = 2/l - x equally.
        for d in &g.d_lambda {
            assert!((d - (0.2 - x / 2.0)).abs() < 1e-6 * x, "{:?}", g.d_lambda);
        }
        assert!(g.d_alpha.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn density_with_no_mass_on_exit_is_floored() {
        // Two terms cannot carry mass from phase 0 to the exit of a 3-phase chain.
        let g = canonical_log_pdf_fixed_terms(&[1.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 0.5, 2, true).unwrap();
        assert_eq!(g.value, LOG_PDF_FLOOR);
        assert!(g.d_alpha.iter().chain(&g.d_lambda).all(|&d| d == 0.0));
    }

    #[test]
    fn rescaled_gradient_matches_finite_differences() {
        // Slow first phase, fast last phase: the iterate decays through many
        // rescalings before the Poisson mode.
        let cfg = UniformizationConfig {
            tolerance: 1e-8,
            max_terms: 1_000_000,
        };
        let alpha = [0.7, 0.2, 0.1];
        let lambda = [0.5, 3.0, 40.0];
        let x = 2000.0;
        let g = canonical_log_pdf_grad(&alpha, &lambda, x, &cfg, true).unwrap();
        assert!(g.value < -700.0 && g.value.is_finite(), "{}", g.value);
        for i in 0..3 {
            let h = 1e-5 * lambda[i];
            let mut lp = lambda;
            let mut lm = lambda;
            lp[i] += h;
            lm[i] -= h;
            let fd = (fixed(&alpha, &lp, x, g.terms) - fixed(&alpha, &lm, x, g.terms)) / (2.0 * h);
            let err = (fd - g.d_lambda[i]).abs() / g.d_lambda[i].abs().max(1.0);
            assert!(err < 1e-5, "lambda[{i}]: fd={fd} an={}", g.d_lambda[i]);
        }
        for i in 0..3 {
            let h = 1e-5;
            let mut ap = alpha;
            let mut am = alpha;
            ap[i] += h;
            am[i] -= h;
            let fd = (fixed(&ap, &lambda, x, g.terms) - fixed(&am, &lambda, x, g.terms)) / (2.0 * h);
            let err = (fd - g.d_alpha[i]).abs() / g.d_alpha[i].abs().max(1.0);
            assert!(err < 1e-5, "alpha[{i}]: fd={fd} an={}", g.d_alpha[i]);
        }
    }
}

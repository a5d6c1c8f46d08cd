//! Exact simulation of the absorbing chain.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use super::PhaseType;
use crate::{Error, Result};

/// Jumps allowed before a path is declared non-absorbing.
pub const MAX_JUMPS: u64 = 10_000_000;

/// One absorption time: start in a phase drawn from `alpha`, hold for an
/// `Exp(-A_ss)` time, then jump to `j` with probability `A_sj / -A_ss` or
/// absorb with probability `t_s / -A_ss`.
pub fn sample<P, R>(ph: &P, rng: &mut R) -> Result<f64>
where
    P: PhaseType + ?Sized,
    R: Rng + ?Sized,
{
    let m = ph.phases();
    let mut state = Some(categorical(ph.alpha(), rng.random::<f64>()));
    let mut x = 0.0;
    let mut jumps = 0u64;
    while let Some(s) = state {
        jumps += 1;
        if jumps > MAX_JUMPS {
            return Err(Error::StepCap(MAX_JUMPS));
        }
        let rate = ph.holding_rate(s);
        let hold: f64 = Exp1.sample(rng);
        x += hold / rate;
        // Walk the outgoing rates until the cumulative mass passes u * rate.
        let target = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut chosen = None;
        for j in 0..m {
            if j == s {
                continue;
            }
            acc += ph.jump_rate(s, j);
            if target < acc {
                chosen = Some(j);
                break;
            }
        }
        state = chosen;
    }
    Ok(x)
}

/// One draw per component, each by [`sample`].
///
/// Components consume the shared `rng` stream in index order, so a fixed
/// seed reproduces the whole vector.
pub fn sample_multivariate<P, R>(phs: &[P], rng: &mut R) -> Result<Vec<f64>>
where
    P: PhaseType,
    R: Rng + ?Sized,
{
    if phs.is_empty() {
        return Err(Error::invalid("need at least one component"));
    }
    phs.iter().map(|ph| sample(ph, rng)).collect()
}

fn categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Round-off left u above the total; take the last supported phase.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

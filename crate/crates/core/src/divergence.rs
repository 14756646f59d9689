//! Kullback–Leibler divergence to the arithmetic mixture and the
//! Jensen–Shannon information radius, in nats.
//!
//! For strictly positive beliefs the divergence to the mixture is bounded by
//! `ln(2 * sup a) - ln(inf (a + b))`; debug builds check that bound on every
//! call. Sums run in ascending index order.

use thiserror::Error;

use crate::model::Belief;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivergenceError {
    #[error("beliefs have different lengths ({0} vs {1})")]
    GridMismatch(usize, usize),
}

/// `sum a * ln(2a / (a + b))` over aligned slices.
pub fn kl_to_mixture_slice(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut total = 0.0;
    for (&pa, &pb) in a.iter().zip(b) {
        if pa > 0.0 {
            total += pa * (2.0 * pa / (pa + pb)).ln();
        }
    }
    #[cfg(debug_assertions)]
    {
        let sup = a.iter().copied().fold(0.0, f64::max);
        let inf = a.iter().zip(b).map(|(x, y)| x + y).fold(f64::INFINITY, f64::min);
        if inf > 0.0 {
            let bound = (2.0 * sup).ln() - inf.ln();
            debug_assert!(total <= bound + 1e-12, "KL {total} exceeds bound {bound}");
        }
    }
    total
}

pub fn jsd_slice(a: &[f64], b: &[f64]) -> f64 {
    // Rounding can leave the sum a hair outside the range.
    (0.5 * (kl_to_mixture_slice(a, b) + kl_to_mixture_slice(b, a))).clamp(0.0, std::f64::consts::LN_2)
}

pub fn kl_to_mixture(a: &Belief, b: &Belief) -> Result<f64, DivergenceError> {
    check(a, b)?;
    Ok(kl_to_mixture_slice(a.probabilities(), b.probabilities()))
}

/// Jensen–Shannon divergence, in `[0, ln 2]`.
pub fn jsd(a: &Belief, b: &Belief) -> Result<f64, DivergenceError> {
    check(a, b)?;
    Ok(jsd_slice(a.probabilities(), b.probabilities()))
}

fn check(a: &Belief, b: &Belief) -> Result<(), DivergenceError> {
    if a.len() != b.len() {
        return Err(DivergenceError::GridMismatch(a.len(), b.len()));
    }
    Ok(())
}

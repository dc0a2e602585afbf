//! Dense-matrix kernel: storage, products, symmetric eigendecomposition,
//! softmax, seeded randomness, and the finite-difference gradient checker.
//!
//! All operations are pure functions of their inputs; nothing keeps hidden
//! state, so values are safe to share across threads once built.

mod eig;
mod gradcheck;
mod mat;
pub mod rng;

pub use eig::{lambda_max, sym_eig, EigenPair};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP, PASS_THRESHOLD};
pub use mat::{dot, Mat};
pub use rng::{seeded_rng, SeededRng};

use crate::error::{Error, Result};

/// Numerically safe softmax: shifts by the maximum before exponentiating.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::validation("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("softmax input contains non-finite entries"));
    }
    Ok(softmax_unchecked(v))
}

/// Softmax without the entry checks, for hot loops that already validated
/// their inputs.
#[inline]
pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

//! Central-difference gradient checking.
//!
//! Every analytic backward pass in the crate is verified against this
//! harness: perturb one coordinate at a time, evaluate the scalar loss on
//! both sides, and compare the finite-difference slope with the analytic
//! gradient.

use super::mat::Mat;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const PASS_THRESHOLD: f64 = 1e-4;

/// Outcome of a gradient check over one or more parameter matrices.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, coordinate index) of the worst coordinate
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error <= threshold
    }
}

/// Compare analytic gradients against central differences.
///
/// `f` evaluates the scalar objective at the current parameters; `analytic`
/// holds the layer-provided gradients, one matrix per parameter, evaluated
/// at the unperturbed point. Parameters are restored exactly after probing
/// (each coordinate is shifted by `+h` then `-2h` then `+h` again in floating
/// point, which returns the original bit pattern only when the stored value
/// round-trips; to stay exact the original value is saved and written back).
pub fn grad_check<F>(
    mut f: F,
    params: &mut [Mat],
    analytic: &[Mat],
    h: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Mat]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::validation(format!(
            "grad_check got {} parameter matrices but {} gradient matrices",
            params.len(),
            analytic.len()
        )));
    }
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::validation("grad_check step must be positive and finite"));
    }
    let mut max_rel_error: f64 = 0.0;
    let mut worst = (0, 0);
    for p in 0..params.len() {
        if (params[p].rows(), params[p].cols()) != (analytic[p].rows(), analytic[p].cols()) {
            return Err(Error::validation(format!(
                "grad_check parameter {p}: shape mismatch between params and gradients"
            )));
        }
        for c in 0..params[p].as_slice().len() {
            let original = params[p].as_slice()[c];

            params[p].as_mut_slice()[c] = original + h;
            let plus = f(params)?;
            params[p].as_mut_slice()[c] = original - h;
            let minus = f(params)?;
            params[p].as_mut_slice()[c] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numerical(format!(
                    "objective is non-finite near parameter {p}, coordinate {c}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[p].as_slice()[c] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (p, c);
            }
        }
    }
    Ok(GradCheckReport { max_rel_error, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{seeded_rng, uniform_mat};

    #[test]
    fn sum_of_squares_gradient() {
        let mut params = vec![uniform_mat(&mut seeded_rng(1), 3, 2, -1.0, 1.0)];
        let analytic = vec![params[0].scale(2.0)];
        let report = grad_check(
            |p| Ok(p[0].as_slice().iter().map(|v| v * v).sum()),
            &mut params,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "error {}", report.max_rel_error);
    }

    #[test]
    fn linear_function_gradient() {
        let coeffs = uniform_mat(&mut seeded_rng(2), 2, 4, -2.0, 2.0);
        let mut params = vec![uniform_mat(&mut seeded_rng(3), 2, 4, -1.0, 1.0)];
        let analytic = vec![coeffs.clone()];
        let report = grad_check(
            |p| {
                Ok(p[0]
                    .as_slice()
                    .iter()
                    .zip(coeffs.as_slice())
                    .map(|(x, c)| c * x)
                    .sum())
            },
            &mut params,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-10, "error {}", report.max_rel_error);
    }

    #[test]
    fn constant_function_gradient_is_zero() {
        let mut params = vec![Mat::zeros(2, 2)];
        let analytic = vec![Mat::zeros(2, 2)];
        let report = grad_check(|_| Ok(7.5), &mut params, &analytic, DEFAULT_STEP).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut params = vec![Mat::zeros(1, 1)];
        let analytic = vec![Mat::zeros(1, 1)];
        // ln of the negative-side probe is NaN
        let err = grad_check(
            |p| Ok(p[0].as_slice()[0].ln()),
            &mut params,
            &analytic,
            DEFAULT_STEP,
        );
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Mat::zeros(2, 2)];
        let analytic = vec![Mat::zeros(2, 3)];
        assert!(grad_check(|_| Ok(0.0), &mut params, &analytic, DEFAULT_STEP).is_err());
    }
}

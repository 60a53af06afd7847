//! Central-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// max over checked parameters of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Relative error per checked parameter, in the order checked.
    pub errors: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compare `analytic` against central differences of `f` around `params`.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_indices(f, params, analytic, eps, &all)
}

/// As [`grad_check`], restricted to the parameter indices in `which`.
pub fn grad_check_indices<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    which: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!("grad_check step {eps} outside [1e-6, 1e-3]")));
    }
    if analytic.len() != params.len() {
        return Err(crate::error::dim_mismatch(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let base = f(params);
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss(format!("f(params) = {base}")));
    }
    let numeric: Vec<Result<f64>> = par::map(which, |&i| {
        let mut p = params.to_vec();
        p[i] = params[i] + eps;
        let up = f(&p);
        p[i] = params[i] - eps;
        let down = f(&p);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss(format!("perturbing parameter {i}: {up}, {down}")));
        }
        Ok((up - down) / (2.0 * eps))
    });
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: which.first().copied().unwrap_or(0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        errors: Vec::with_capacity(which.len()),
    };
    for (&i, num) in which.iter().zip(numeric) {
        let num = num?;
        let err = relative_error(analytic[i], num);
        if report.errors.is_empty() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = num;
        }
        report.errors.push(err);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let r = grad_check(|w| w[0] * w[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = grad_check(|w| w[0] * w[0] + w[1], &[3.0, 1.0], &[6.0, 2.0], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.5);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(grad_check(|w| w[0], &[1.0], &[1.0], 1e-2).is_err());
        assert!(matches!(
            grad_check(|_| f64::NAN, &[1.0], &[1.0], 1e-5),
            Err(Error::NonFiniteLoss(_))
        ));
    }
}

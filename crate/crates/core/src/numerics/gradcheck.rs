use serde::Serialize;

use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference estimate `(f(p + h·e_i) − f(p − h·e_i)) / 2h` for
/// every coordinate of `params`.
pub fn finite_difference_gradient<F>(mut loss: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = loss(&probe);
        probe[i] = params[i] - step;
        let minus = loss(&probe);
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::ProbeFailure {
                param: "params".into(),
                index: i,
            });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of comparing one parameter tensor against its numeric gradient.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensor: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn compare(tensor: impl Into<String>, analytic: &[f64], numeric: &[f64], tolerance: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
        let max_relative_error = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max);
        GradCheckReport {
            tensor: tensor.into(),
            entries: analytic.len(),
            max_relative_error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(|p: &[f64]| p[0] * p[0], &[3.0], DEFAULT_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_difference_gradient(|_: &[f64]| 4.2, &[1.0, -2.0, 0.5], DEFAULT_STEP).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_probe_names_the_coordinate() {
        let err = finite_difference_gradient(
            |p: &[f64]| if p[1] > 1.0 { f64::NAN } else { p[0] },
            &[0.0, 1.0],
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ProbeFailure { index: 1, .. }));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}

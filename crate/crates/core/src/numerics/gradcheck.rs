//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

/// Relative error used by the checker: `|g - fd| / max(|g|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between `analytic` and a central difference of `value`
/// over every coordinate of `params`.
pub fn finite_diff_check<F>(value: F, analytic: &[f64], params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_coords(value, analytic, params, step, &coords)
}

/// As [`finite_diff_check`], restricted to the listed coordinates.
pub fn finite_diff_check_coords<F>(
    mut value: F,
    analytic: &[f64],
    params: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("gradient len {}", analytic.len()),
            format!("params len {}", params.len()),
        ));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = value(&probe)?;
        probe[i] = orig - step;
        let down = value(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value probing coordinate {i}")));
        }
        let fd = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    Ok(worst)
}

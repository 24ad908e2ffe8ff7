//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Default finite-difference step at f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Default acceptance tolerance on the relative error.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of checking one gradient vector against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error used throughout: `|ga - gn| / max(1, |ga|, |gn|)`.
#[inline]
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare `analytic` against central differences `(f(x+h) - f(x-h)) / 2h`
/// coordinate by coordinate. `x` is restored before returning.
pub fn finite_diff_gradcheck<F>(
    mut f: F,
    x: &mut [f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "gradcheck: {} inputs vs {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!(
            "gradcheck step must be positive, got {step}"
        )));
    }
    let mut report = GradCheckReport {
        checked: x.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in 0..x.len() {
        let g_a = analytic[i];
        if !g_a.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient at index {i}")));
        }
        let orig = x[i];
        x[i] = orig + step;
        let up = f(x)?;
        x[i] = orig - step;
        let down = f(x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective while perturbing index {i}"
            )));
        }
        let g_n = (up - down) / (2.0 * step);
        let rel = rel_error(g_a, g_n);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = g_a;
            report.worst_numeric = g_n;
        }
    }
    Ok(report)
}

use crate::error::{shape_err, Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Worst coordinate of an analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    /// Keeps whichever of the two reports is worse.
    pub fn worst(self, other: GradCheckReport) -> GradCheckReport {
        if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        }
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `grad_f(x)` against central differences of `f` at `x`.
pub fn check_gradient<F, G>(f: F, grad_f: G, x: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let analytic = grad_f(x);
    if analytic.len() != x.len() {
        return Err(shape_err(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut probe = x.to_vec();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite near coordinate {i}"
            )));
        }
        let n = (plus - minus) / (2.0 * h);
        let err = relative_error(a, n);
        if i == 0 || err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    Ok(report)
}

use crate::error::{Error, Result};

/// Norm below which a vector cannot be normalized.
pub const EPSILON_NORM: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `log Σ exp(v_i)`, shifted by the maximum so large inputs do not overflow.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("log_sum_exp of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("log_sum_exp of non-finite entry".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `softmax(scale * v)`.
pub fn softmax(v: &[f64], scale: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of empty vector".into()));
    }
    if !scale.is_finite() {
        return Err(Error::Domain("softmax scale must be finite".into()));
    }
    let scaled: Vec<f64> = v.iter().map(|x| scale * x).collect();
    let lse = log_sum_exp(&scaled)?;
    Ok(scaled.iter().map(|s| (s - lse).exp()).collect())
}

/// Pulls an upstream gradient on `p = softmax(a)` back onto `a`:
/// `p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_backward(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner = dot(p, upstream);
    p.iter()
        .zip(upstream)
        .map(|(pi, gi)| pi * (gi - inner))
        .collect()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > EPSILON_NORM) {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Gradient of `u = z / ‖z‖` with respect to `z`, applied to `upstream`:
/// `(I − u uᵀ) g / ‖z‖`.
pub fn normalize_backward(unit: &[f64], pre_norm: f64, upstream: &[f64]) -> Vec<f64> {
    let along = dot(unit, upstream);
    unit.iter()
        .zip(upstream)
        .map(|(u, g)| (g - u * along) / pre_norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        // naive formula agrees where it does not overflow
        let small = [0.3, -1.2, 2.5];
        let naive = small.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&small).unwrap() - naive).abs() < 1e-14);
        assert!(matches!(log_sum_exp(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1.0, 0.0], 0.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2.0, 0.0], 1.0).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!(softmax(&[], 1.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let unit = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&unit).unwrap(), unit.to_vec());
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn normalize_jacobian_kills_parallel_component() {
        let u = l2_normalize(&[1.0, 2.0, -2.0]).unwrap();
        let g: Vec<f64> = u.iter().map(|x| 3.0 * x).collect();
        let back = normalize_backward(&u, 3.0, &g);
        assert!(back.iter().all(|x| x.abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1e3f64..1e3, 1..20), scale in -2.0f64..2.0) {
            let p = softmax(&v, scale).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn lse_bounds(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let lse = log_sum_exp(&v).unwrap();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max);
            prop_assert!(lse <= max + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-10f64..10.0, 1..20)) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() < 1e-12);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

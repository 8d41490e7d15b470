//! Scalar losses with analytic gradients w.r.t. the predictions.

use super::{NumericError, Result};

/// Predictions are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross entropy over dimensions.
///
/// Targets must be exactly 0 or 1. Returns the loss and `dL/dp`, evaluated
/// at the clamped prediction.
pub fn bce_loss(predictions: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != targets.len() {
        return Err(NumericError::DimensionMismatch {
            op: "bce_loss",
            lhs: format!("predictions len {}", predictions.len()),
            rhs: format!("targets len {}", targets.len()),
        });
    }
    for (i, &t) in targets.iter().enumerate() {
        if t != 0.0 && t != 1.0 {
            return Err(NumericError::NonBinaryTarget { index: i, value: t });
        }
    }
    let n = predictions.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; predictions.len()];
    for i in 0..predictions.len() {
        let p = predictions[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let t = targets[i];
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad[i] = (-t / p + (1.0 - t) / (1.0 - p)) / n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(NumericError::NonFinite { stage: "bce_loss" });
    }
    Ok((loss, grad))
}

/// Mean squared error over dimensions, with `dL/dp`.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != targets.len() {
        return Err(NumericError::DimensionMismatch {
            op: "mse_loss",
            lhs: format!("predictions len {}", predictions.len()),
            rhs: format!("targets len {}", targets.len()),
        });
    }
    let n = predictions.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; predictions.len()];
    for i in 0..predictions.len() {
        let d = predictions[i] - targets[i];
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_half_prediction_is_ln2() {
        let (loss, _) = bce_loss(&[0.5], &[1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let (loss, _) = bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn bce_rejects_non_binary_target() {
        let err = bce_loss(&[0.5], &[0.3]).unwrap_err();
        assert!(matches!(err, NumericError::NonBinaryTarget { index: 0, .. }));
    }

    #[test]
    fn mse_exact_match_is_zero() {
        let (loss, grad) = mse_loss(&[1.0], &[1.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, vec![0.0]);
    }

    #[test]
    fn mse_constant_offset_squares() {
        let (loss, _) = mse_loss(&[3.0, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!(loss, 4.0);
    }
}

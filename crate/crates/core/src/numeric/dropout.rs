//! Inverted dropout: survivors are scaled at train time so that evaluation
//! is the identity.

use rand::Rng;

use super::{NumericError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Per-entry multipliers saved by the forward pass: 0 for dropped entries,
/// `1/(1-rate)` for survivors, 1 in eval mode.
#[derive(Debug, Clone)]
pub struct DropoutMask(Vec<f64>);

impl DropoutMask {
    pub fn factors(&self) -> &[f64] {
        &self.0
    }
}

pub fn dropout_forward<R: Rng>(
    x: &[f64],
    rate: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Vec<f64>, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumericError::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    match mode {
        DropoutMode::Eval => Ok((x.to_vec(), DropoutMask(vec![1.0; x.len()]))),
        DropoutMode::Train => {
            let keep = 1.0 - rate;
            let scale = 1.0 / keep;
            let mut mask = vec![0.0; x.len()];
            let mut y = vec![0.0; x.len()];
            for i in 0..x.len() {
                if rng.random::<f64>() >= rate {
                    mask[i] = scale;
                    y[i] = x[i] * scale;
                }
            }
            Ok((y, DropoutMask(mask)))
        }
    }
}

pub fn dropout_backward(mask: &DropoutMask, dy: &[f64]) -> Vec<f64> {
    debug_assert_eq!(mask.0.len(), dy.len());
    mask.0.iter().zip(dy.iter()).map(|(m, d)| m * d).collect()
}

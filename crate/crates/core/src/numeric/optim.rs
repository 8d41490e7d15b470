//! Stochastic gradient descent with momentum, and Adam, both with a stepped
//! learning-rate decay schedule and L2 regularization folded into the
//! gradient.

use super::{NumericError, OptState, ParamId, ParameterSet, Result, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_penalty: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    /// SGD with momentum 0.5, learning rate 0.05 decayed by 0.1 every 10
    /// epochs, L2 penalty 1e-6.
    pub fn sgd_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 0.05,
            momentum: 0.5,
            l2_penalty: 1e-6,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Adam with the usual beta/epsilon defaults and no decay.
    pub fn adam_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 0.002,
            momentum: 0.0,
            l2_penalty: 1e-6,
            lr_decay_factor: 1.0,
            lr_decay_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(NumericError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NumericError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) {
            return Err(NumericError::Config(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(NumericError::Config(
                "lr_decay_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `lr(epoch) = lr0 * factor^(epoch / every)`, integer division.
pub fn effective_learning_rate(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Apply one optimizer update to the listed parameters.
///
/// Every listed parameter must have a populated gradient. L2 is added to the
/// gradient before any state update.
pub fn optimizer_step(
    ps: &mut ParameterSet,
    ids: &[ParamId],
    cfg: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    cfg.validate()?;
    let lr = effective_learning_rate(cfg, epoch);
    for &id in ids {
        if !ps.grad_is_set(id) {
            return Err(NumericError::MissingGradient(ps.name(id).to_string()));
        }
        let (rows, cols) = ps.value(id).shape();
        // Lazily allocate state of the right kind; a kind switch mid-training
        // is a caller bug.
        match (cfg.kind, ps.state(id)) {
            (OptimizerKind::SgdMomentum, OptState::Empty) => {
                ps.set_state(
                    id,
                    OptState::Sgd {
                        velocity: Tensor2::zeros(rows, cols),
                    },
                );
            }
            (OptimizerKind::Adam, OptState::Empty) => {
                ps.set_state(
                    id,
                    OptState::Adam {
                        m: Tensor2::zeros(rows, cols),
                        v: Tensor2::zeros(rows, cols),
                        t: 0,
                    },
                );
            }
            (OptimizerKind::SgdMomentum, OptState::Sgd { .. })
            | (OptimizerKind::Adam, OptState::Adam { .. }) => {}
            _ => return Err(NumericError::StateMismatch(ps.name(id).to_string())),
        }

        let grad = ps.grad(id).clone();
        let weight_snapshot = ps.value(id).clone();
        let update = match ps.state_mut(id) {
            OptState::Sgd { velocity } => {
                // v <- momentum*v + g + l2*w ; w <- w - lr*v
                for i in 0..velocity.data().len() {
                    let g = grad.data()[i] + cfg.l2_penalty * weight_snapshot.data()[i];
                    velocity.data_mut()[i] = cfg.momentum * velocity.data()[i] + g;
                }
                velocity.clone()
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
                let mut update = Tensor2::zeros(rows, cols);
                for i in 0..m.data().len() {
                    let g = grad.data()[i] + cfg.l2_penalty * weight_snapshot.data()[i];
                    let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
                    let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    update.data_mut()[i] = (mi / bc1) / ((vi / bc2).sqrt() + cfg.epsilon);
                }
                update
            }
            OptState::Empty => unreachable!("state allocated above"),
        };
        ps.value_mut(id).add_scaled(&update, -lr);
        if !ps.value(id).is_finite() {
            return Err(NumericError::NonFinite {
                stage: "optimizer_step",
            });
        }
    }
    Ok(())
}

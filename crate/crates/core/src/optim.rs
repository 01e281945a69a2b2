//! Update rules applied to a [`ParamSet`].

use crate::backbone::{GradSet, ParamSet};
use crate::config::Optimizer;
use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Stateful step rule: plain gradient descent or Adam.
#[derive(Debug, Clone)]
pub enum StepRule {
    Sgd,
    Adam {
        m: ParamSet,
        v: ParamSet,
        step: u64,
    },
}

impl StepRule {
    pub fn new(kind: Optimizer, like: &ParamSet) -> Self {
        match kind {
            Optimizer::Sgd => StepRule::Sgd,
            Optimizer::Adam => StepRule::Adam {
                m: like.zeros_like(),
                v: like.zeros_like(),
                step: 0,
            },
        }
    }

    pub fn kind(&self) -> Optimizer {
        match self {
            StepRule::Sgd => Optimizer::Sgd,
            StepRule::Adam { .. } => Optimizer::Adam,
        }
    }

    pub(crate) fn check_compatible(&self, kind: Optimizer, like: &ParamSet) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::Config(format!(
                "optimizer state is {} but the config asks for {}",
                self.kind().as_str(),
                kind.as_str()
            )));
        }
        if let StepRule::Adam { m, v, .. } = self {
            like.check_shape(m)?;
            like.check_shape(v)?;
        }
        Ok(())
    }

    /// Applies one step of size `lr` along `-grad` to `params`.
    pub fn apply(&mut self, params: &mut ParamSet, grad: &GradSet, lr: f64) {
        match self {
            StepRule::Sgd => sgd_step(params, grad, lr),
            StepRule::Adam { m, v, step } => {
                *step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// `params -= lr * grad`.
pub fn sgd_step(params: &mut ParamSet, grad: &GradSet, lr: f64) {
    params.axpy(-lr, grad);
}

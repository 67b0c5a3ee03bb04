use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{DplError, Result};

/// Plain stochastic gradient descent: no momentum, no weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64) -> Result<Self> {
        let cfg = SgdConfig { learning_rate };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A zero rate is accepted so that a parameter group can be held fixed.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DplError::contract(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 3.5e-3,
        }
    }
}

/// `param <- param - lr * grad`, then zeroes every gradient.
///
/// Every parameter must carry a populated gradient; nothing is updated if one
/// is missing.
pub fn sgd_step(params: &mut [&mut Tensor], cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(DplError::contract(format!("parameter {i} has no gradient")));
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        if cfg.learning_rate != 0.0 {
            p.values_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(v, g)| *v -= cfg.learning_rate * g);
        }
        p.grad = Some(vec![0.0; grad.len()]);
    }
    Ok(())
}

use crate::error::{Error, Result};

use super::ModelParams;

/// Classical momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ModelParams,
}

impl SgdMomentum {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.velocity) {
            return Err(Error::dim("optimizer step with mismatched parameter shapes"));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, g), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            momentum_update(p, g, v, lr, mu);
        }
        Ok(())
    }
}

/// The same update on loose buffers, for parameters living outside the network.
pub fn momentum_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, mu: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

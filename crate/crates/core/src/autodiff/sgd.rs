use super::tensor::ParamStore;
use crate::error::{config, state, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor of a store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentumBuffers {
    pub buffers: Vec<Vec<f64>>,
}

impl MomentumBuffers {
    pub fn for_store(store: &ParamStore) -> Self {
        Self { buffers: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect() }
    }
}

/// `buf = momentum * buf + (grad + wd * param); param -= lr * buf`, then clears grads.
pub fn sgd_step(params: &mut ParamStore, momentum: &mut MomentumBuffers, cfg: &SgdConfig) -> Result<()> {
    if momentum.buffers.len() != params.len() {
        return config("momentum buffers do not match the parameter store");
    }
    for i in 0..params.len() {
        if params.get(i).grad().is_none() {
            return state(format!("parameter {} has no gradient", params.name(i)));
        }
    }
    for (i, buf) in momentum.buffers.iter_mut().enumerate() {
        let t = params.get_mut(i);
        let grad = t.grad().expect("checked above").to_vec();
        for ((p, g), b) in t.data_mut().iter_mut().zip(&grad).zip(buf.iter_mut()) {
            let step = g + cfg.weight_decay * *p;
            *b = cfg.momentum * *b + step;
            *p -= cfg.learning_rate * *b;
        }
        t.zero_grad();
    }
    Ok(())
}

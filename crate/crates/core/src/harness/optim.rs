use pllforge_autodiff::{Gradients, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Smoothing constant of the squared-gradient average.
    pub rho: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            epochs: 20,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return invalid("rho must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("eps must be positive");
        }
        Ok(())
    }
}

/// RMSProp without momentum. Group `g` uses `lr · decay_g^epoch`.
pub struct RmsProp {
    cfg: OptimizerConfig,
    sq: Vec<Option<Tensor>>,
}

impl RmsProp {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        Self {
            cfg: cfg.clone(),
            sq: vec![None; store.len()],
        }
    }

    pub fn group_lr(&self, group: usize, epoch: usize, decays: &[f64]) -> f64 {
        let d = decays.get(group).copied().unwrap_or(1.0);
        self.cfg.lr * d.powi(epoch as i32)
    }

    pub fn step(&mut self, store: &mut ParamStore, vars: &[Var], grads: &Gradients, epoch: usize, decays: &[f64]) {
        let (rho, eps) = (self.cfg.rho, self.cfg.eps);
        for i in 0..store.len() {
            let (trainable, group) = {
                let p = &store.params()[i];
                (p.trainable, p.group)
            };
            if !trainable {
                continue;
            }
            let Some(g) = grads.get(vars[i]) else { continue };
            let lr = self.group_lr(group, epoch, decays);
            let sq = self.sq[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let param = store.param_mut(i);
            for ((w, s), &gv) in param.value.data_mut().iter_mut().zip(sq.data_mut()).zip(g.data()) {
                *s = rho * *s + (1.0 - rho) * gv * gv;
                *w -= lr * gv / (s.sqrt() + eps);
            }
        }
    }
}

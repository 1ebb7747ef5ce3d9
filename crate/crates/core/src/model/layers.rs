use pllforge_autodiff::{BatchNormMode, Tape, Tensor, Var};
use rand::Rng;

use super::params::{init_uniform, Bind, BnUpdate, ParamId, ParamStore};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(&[fan_in, fan_out], fan_in, rng), group);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), group);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// `x: [B, in]` → `[B, out]`.
    pub fn forward(&self, t: &mut Tape, bind: &Bind, x: Var) -> Result<Var> {
        Ok(t.linear(x, bind.var(self.w), bind.var(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init_uniform(&[c_out, c_in, kernel], c_in * kernel, rng),
            group,
        );
        Self { w, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, bind: &Bind, x: Var) -> Result<Var> {
        Ok(t.conv1d(x, bind.var(self.w), self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean_key: String,
    pub var_key: String,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), group);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group);
        let mean_key = format!("{name}.running_mean");
        let var_key = format!("{name}.running_var");
        store.set_buffer(mean_key.clone(), Tensor::zeros(&[channels]));
        store.set_buffer(var_key.clone(), Tensor::ones(&[channels]));
        Self {
            gamma,
            beta,
            mean_key,
            var_key,
        }
    }

    /// Batch statistics in training mode (recording a running-stat update),
    /// running statistics otherwise.
    pub fn forward(&self, t: &mut Tape, bind: &mut Bind, x: Var) -> Result<Var> {
        let (g, b) = (bind.var(self.gamma), bind.var(self.beta));
        if bind.train {
            let (y, stats) = t.batch_norm(x, g, b, BatchNormMode::Train { eps: BN_EPS })?;
            if let Some(stats) = stats {
                bind.bn.push(BnUpdate {
                    mean_key: self.mean_key.clone(),
                    var_key: self.var_key.clone(),
                    stats,
                });
            }
            Ok(y)
        } else {
            let store = bind.store;
            let mean = store.buffer(&self.mean_key).expect("running mean registered");
            let var = store.buffer(&self.var_key).expect("running var registered");
            let (y, _) = t.batch_norm(
                x,
                g,
                b,
                BatchNormMode::Eval {
                    mean: mean.data(),
                    var: var.data(),
                    eps: BN_EPS,
                },
            )?;
            Ok(y)
        }
    }
}

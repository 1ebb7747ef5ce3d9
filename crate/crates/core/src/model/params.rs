use std::collections::BTreeMap;

use pllforge_autodiff::{BatchStats, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

/// Momentum of batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Learning-rate group.
    pub group: usize,
    /// Frozen parameters are bound as constants and never stepped.
    pub trainable: bool,
}

/// Named parameters plus non-differentiable buffers (running statistics and
/// persistent algorithm state needed at evaluation time).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: usize) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value, 0);
        self.params[id.0].trainable = false;
        id
    }

    /// Marks every parameter from `start` on as frozen.
    pub fn freeze_from(&mut self, start: usize) {
        for p in &mut self.params[start..] {
            p.trainable = false;
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    /// Copies every parameter and buffer value from `other`, which must hold
    /// the same names and shapes in the same order.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(CoreError::Invalid(format!(
                "parameter count {} does not match {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(CoreError::Invalid(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        self.buffers = other.buffers.clone();
        Ok(())
    }

    /// Records every parameter on the tape, frozen ones as constants.
    pub fn bind_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (key, fresh) in [(&u.mean_key, &u.stats.mean), (&u.var_key, &u.stats.var)] {
                if let Some(buf) = self.buffers.get_mut(key) {
                    for (r, v) in buf.data_mut().iter_mut().zip(fresh) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                }
            }
        }
    }
}

/// Uniform `±1/sqrt(fan_in)` initialisation.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// Running-statistic update emitted by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub mean_key: String,
    pub var_key: String,
    pub stats: BatchStats,
}

/// A store bound onto one tape for one forward pass.
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub vars: &'a [Var],
    pub train: bool,
    pub bn: Vec<BnUpdate>,
}

impl<'a> Bind<'a> {
    pub fn new(store: &'a ParamStore, vars: &'a [Var], train: bool) -> Self {
        Self {
            store,
            vars,
            train,
            bn: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

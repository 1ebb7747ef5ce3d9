use pllforge_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::losses::{
    cavl_select, dnpl_loss, lw_loss, lw_weights, nopll_loss, one_hot, renormalize_on_candidates,
    soft_ce_loss, uniform_on_candidates,
};
use super::{eval_backbone_logits, row, softmax_rows, table_tensor, Algorithm, Batch, Learner, Step, TrainSet};
use crate::error::Result;
use crate::model::{Backbone, BackboneConfig, Bind, ParamStore};

/// A backbone with a classification head and its parameters.
pub(crate) struct Single {
    pub store: ParamStore,
    pub bb: Backbone,
}

impl Single {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "net", cfg, true, 0, rng)?;
        Ok(Self { store, bb })
    }

    /// Train-mode logits for the batch.
    pub fn forward(&self, t: &mut Tape, vars: &[Var], x: &Tensor) -> Result<(Var, Var, Vec<crate::model::BnUpdate>)> {
        let mut bind = Bind::new(&self.store, vars, true);
        let xv = t.constant(x.clone());
        let out = self.bb.forward(t, &mut bind, xv)?;
        Ok((out.logits.expect("head"), out.embedding, bind.bn))
    }
}

macro_rules! single_accessors {
    ($alg:expr) => {
        fn algorithm(&self) -> Algorithm {
            $alg
        }
        fn store(&self) -> &ParamStore {
            &self.net.store
        }
        fn store_mut(&mut self) -> &mut ParamStore {
            &mut self.net.store
        }
        fn logits(&self, x: &Tensor) -> Result<Tensor> {
            eval_backbone_logits(&self.net.bb, &self.net.store, x)
        }
    };
}

/// Baseline: per-class binary cross-entropy with every candidate as positive.
pub struct NoPll {
    net: Single,
}

impl NoPll {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Single::new(cfg, rng)? })
    }
}

impl Learner for NoPll {
    single_accessors!(Algorithm::NoPll);

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let (z, _, bn) = self.net.forward(t, vars, &batch.x)?;
        Ok(Step {
            loss: nopll_loss(t, z, &batch.mask)?,
            bn,
        })
    }
}

/// Maximises the softmax mass on the candidate set.
pub struct Dnpl {
    net: Single,
}

impl Dnpl {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Single::new(cfg, rng)? })
    }
}

impl Learner for Dnpl {
    single_accessors!(Algorithm::Dnpl);

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let (z, _, bn) = self.net.forward(t, vars, &batch.x)?;
        Ok(Step {
            loss: dnpl_loss(t, z, &batch.mask)?,
            bn,
        })
    }
}

/// Weighted cross-entropy whose candidate weights are re-estimated from the
/// model's softmax at the end of every epoch.
pub struct Proden {
    net: Single,
    weights: Vec<Vec<f64>>,
    seen: Vec<Option<Vec<f64>>>,
}

impl Proden {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: Single::new(cfg, rng)?,
            weights: Vec::new(),
            seen: Vec::new(),
        })
    }
}

impl Learner for Proden {
    single_accessors!(Algorithm::Proden);

    fn begin(&mut self, data: &TrainSet, _epochs: usize) -> Result<()> {
        self.weights = data
            .candidates
            .iter()
            .map(|s| uniform_on_candidates(data.num_classes, s))
            .collect();
        self.seen = vec![None; data.len()];
        Ok(())
    }

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let (z, _, bn) = self.net.forward(t, vars, &batch.x)?;
        for (&i, p) in batch.indices.iter().zip(softmax_rows(t.value(z))) {
            self.seen[i] = Some(p);
        }
        let w = table_tensor(&self.weights, &batch.indices);
        Ok(Step {
            loss: soft_ce_loss(t, z, &w)?,
            bn,
        })
    }

    fn end_epoch(&mut self, _epoch: usize, data: &TrainSet) -> Result<()> {
        for (i, seen) in self.seen.iter_mut().enumerate() {
            if let Some(p) = seen.take() {
                self.weights[i] = renormalize_on_candidates(&p, &data.candidates[i]);
            }
        }
        Ok(())
    }

    fn label_table(&self) -> Option<&[Vec<f64>]> {
        Some(&self.weights)
    }
}

/// Cross-entropy on the candidate with the largest `|f − 1|·f` of the raw
/// outputs.
pub struct Cavl {
    net: Single,
}

impl Cavl {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Single::new(cfg, rng)? })
    }
}

impl Learner for Cavl {
    single_accessors!(Algorithm::Cavl);

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let (z, _, bn) = self.net.forward(t, vars, &batch.x)?;
        let c = t.shape(z)[1];
        let zt = t.value(z).clone();
        let mut targets = Vec::with_capacity(batch.size() * c);
        for r in 0..batch.size() {
            let cand = mask_row_set(&batch.mask, r);
            targets.extend(one_hot(c, cavl_select(&row(&zt, r), &cand)));
        }
        let w = Tensor::new(vec![batch.size(), c], targets)?;
        Ok(Step {
            loss: soft_ce_loss(t, z, &w)?,
            bn,
        })
    }
}

pub(crate) fn mask_row_set(mask: &Tensor, r: usize) -> crate::data::LabelSet {
    row(mask, r)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(j, _)| j)
        .collect()
}

/// Logistic loss on candidates plus `β`-weighted logistic loss pushing
/// non-candidates down, each weighted by a within-group softmax of the
/// current logits.
pub struct Lw {
    net: Single,
    beta: f64,
}

impl Lw {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, beta: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: Single::new(cfg, rng)?,
            beta,
        })
    }
}

impl Learner for Lw {
    single_accessors!(Algorithm::Lw);

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let (z, _, bn) = self.net.forward(t, vars, &batch.x)?;
        let c = t.shape(z)[1];
        let zt = t.value(z).clone();
        let mut w = Vec::with_capacity(batch.size() * c);
        for r in 0..batch.size() {
            w.extend(lw_weights(&row(&zt, r), &mask_row_set(&batch.mask, r)));
        }
        let w = Tensor::new(vec![batch.size(), c], w)?;
        Ok(Step {
            loss: lw_loss(t, z, &batch.mask, &w, self.beta)?,
            bn,
        })
    }
}

use pllforge_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::losses::{augment_tensor, conformal_target, cr_gamma, cr_loss, uniform_on_candidates, Strength};
use super::simple::Single;
use super::{eval_backbone_logits, softmax_rows, table_tensor, Algorithm, AlgorithmConfig, Batch, Learner, Step, TrainSet};
use crate::error::Result;
use crate::model::{BackboneConfig, ParamStore};

/// Negative-label loss on the clean input plus a ramped consistency term
/// pulling weak and strong noisy views toward a conformal target.
pub struct Cr {
    net: Single,
    lambda: f64,
    sigma: f64,
    mu: f64,
    target: Vec<Vec<f64>>,
    seen: Vec<Option<[Vec<f64>; 2]>>,
}

impl Cr {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, hp: &AlgorithmConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: Single::new(cfg, rng)?,
            lambda: hp.cr_lambda,
            sigma: hp.aug_sigma,
            mu: hp.aug_mu,
            target: Vec::new(),
            seen: Vec::new(),
        })
    }
}

impl Learner for Cr {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Cr
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

    fn begin(&mut self, data: &TrainSet, _epochs: usize) -> Result<()> {
        self.target = data
            .candidates
            .iter()
            .map(|s| uniform_on_candidates(data.num_classes, s))
            .collect();
        self.seen = vec![None; data.len()];
        Ok(())
    }

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let mut rng = batch.rng("awgn");
        let weak = augment_tensor(&batch.x, self.mu, self.sigma, Strength::Weak, &mut rng);
        let strong = augment_tensor(&batch.x, self.mu, self.sigma, Strength::Strong, &mut rng);
        let (z, _, mut bn) = self.net.forward(t, vars, &batch.x)?;
        let (zw, _, bw) = self.net.forward(t, vars, &weak)?;
        let (zs, _, bs) = self.net.forward(t, vars, &strong)?;
        bn.extend(bw);
        bn.extend(bs);
        let pw = softmax_rows(t.value(zw));
        let ps = softmax_rows(t.value(zs));
        for ((&i, a), b) in batch.indices.iter().zip(pw).zip(ps) {
            self.seen[i] = Some([a, b]);
        }
        let target = table_tensor(&self.target, &batch.indices);
        let gamma = cr_gamma(batch.epoch, batch.epochs, self.lambda);
        Ok(Step {
            loss: cr_loss(t, z, &[zw, zs], &batch.mask, &target, gamma)?,
            bn,
        })
    }

    fn end_epoch(&mut self, _epoch: usize, data: &TrainSet) -> Result<()> {
        for (i, seen) in self.seen.iter_mut().enumerate() {
            if let Some([a, b]) = seen.take() {
                self.target[i] = conformal_target(&[&a, &b], &data.candidates[i]);
            }
        }
        Ok(())
    }

    fn label_table(&self) -> Option<&[Vec<f64>]> {
        Some(&self.target)
    }
}

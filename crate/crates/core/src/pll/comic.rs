use pllforge_autodiff::{Gradients, Tape, Tensor, Var};
use rand::Rng;

use super::losses::head_tail_factors;
use super::objectives::{comic_objective, FocalFactors};
use super::{bind_constants, Algorithm, AlgorithmConfig, Batch, Learner, Step, TrainSet};
use crate::error::Result;
use crate::model::{AttentionFuse, Backbone, BackboneConfig, Bind, MultiHeadClassifier, ParamStore};

const BIAS: &str = "comic.grad_bias";
const RUNNING: &str = "comic.running_prob";

/// Head, balanced and tail experts sharing a cosine multi-head classifier,
/// with gradient-bias adjusted distillation into the balanced model and
/// confidence-based candidate correction.
pub struct Comic {
    store: ParamStore,
    head_net: Backbone,
    balanced_net: Backbone,
    tail_net: Backbone,
    fuse: AttentionFuse,
    classifier: MultiHeadClassifier,
    cfg: AlgorithmConfig,
    focal: FocalFactors,
    phi_b: Option<Var>,
    prob_sum: Vec<f64>,
    prob_rows: usize,
    last_kappa: (f64, f64),
}

struct Views {
    z_h: Var,
    z_t: Var,
    z_b: Var,
    phi_b: Var,
}

impl Comic {
    pub fn new<R: Rng + ?Sized>(bb: &BackboneConfig, cfg: &AlgorithmConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let (c, e) = (bb.num_classes, bb.embed_dim);
        let head_net = Backbone::new(&mut store, "head", bb, false, 0, rng)?;
        let balanced_net = Backbone::new(&mut store, "balanced", bb, false, 1, rng)?;
        let tail_net = Backbone::new(&mut store, "tail", bb, false, 2, rng)?;
        let fuse = AttentionFuse::new(&mut store, "attn", e, cfg.comic_att_dim, 1, rng);
        let classifier = MultiHeadClassifier::new(
            &mut store,
            "mhc",
            c,
            e,
            cfg.comic_groups,
            cfg.comic_rho,
            cfg.comic_eta,
            1,
            rng,
        )?;
        store.set_buffer(BIAS, Tensor::zeros(&[e]));
        store.set_buffer(RUNNING, Tensor::zeros(&[c]));
        Ok(Self {
            store,
            head_net,
            balanced_net,
            tail_net,
            fuse,
            classifier,
            cfg: cfg.clone(),
            focal: FocalFactors::new(vec![1.0; c], cfg),
            phi_b: None,
            prob_sum: vec![0.0; c],
            prob_rows: 0,
            last_kappa: (0.5, 0.5),
        })
    }

    pub fn focal(&self) -> &FocalFactors {
        &self.focal
    }

    pub fn grad_bias(&self) -> &[f64] {
        self.store.buffer(BIAS).expect("bias buffer").data()
    }

    pub fn running_prob(&self) -> &[f64] {
        self.store.buffer(RUNNING).expect("running buffer").data()
    }

    pub fn last_kappa(&self) -> (f64, f64) {
        self.last_kappa
    }

    fn views(&self, t: &mut Tape, bind: &mut Bind, x: &Tensor) -> Result<Views> {
        let xv = t.constant(x.clone());
        let phi_h = self.head_net.forward(t, bind, xv)?.embedding;
        let phi_t = self.tail_net.forward(t, bind, xv)?.embedding;
        let phi_hat = self.balanced_net.forward(t, bind, xv)?.embedding;
        let (phi_b, _) = self.fuse.forward(t, bind, phi_hat, &[phi_h, phi_t])?;
        let e = self.grad_bias().to_vec();
        let z_h = self.classifier.forward(t, bind, phi_h)?;
        let z_h = self.classifier.bias_adjust(t, bind, z_h, phi_h, &e, 1.0)?;
        let z_t = self.classifier.forward(t, bind, phi_t)?;
        let z_t = self.classifier.bias_adjust(t, bind, z_t, phi_t, &e, -1.0)?;
        let z_b = self.classifier.forward(t, bind, phi_b)?;
        Ok(Views { z_h, z_t, z_b, phi_b })
    }
}

impl Learner for Comic {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Comic
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn group_decays(&self) -> Vec<f64> {
        self.cfg.comic_decays.to_vec()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let vars = bind_constants(&self.store, &mut t);
        let mut bind = Bind::new(&self.store, &vars, false);
        let v = self.views(&mut t, &mut bind, x)?;
        Ok(t.value(v.z_b).clone())
    }

    fn begin(&mut self, data: &TrainSet, _epochs: usize) -> Result<()> {
        self.focal = FocalFactors::new(head_tail_factors(&data.candidate_counts()), &self.cfg);
        let e = self.grad_bias().len();
        self.store.set_buffer(BIAS, Tensor::zeros(&[e]));
        self.store.set_buffer(RUNNING, Tensor::zeros(&[data.num_classes]));
        self.prob_sum = vec![0.0; data.num_classes];
        self.prob_rows = 0;
        Ok(())
    }

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let mut bind = Bind::new(&self.store, vars, true);
        let v = self.views(t, &mut bind, &batch.x)?;
        let running = self.running_prob().to_vec();
        let terms = comic_objective(t, v.z_h, v.z_t, v.z_b, &batch.mask, &running, &self.focal, &self.cfg)?;
        self.last_kappa = terms.kappa;
        for p in &terms.probs {
            for (s, pj) in self.prob_sum.iter_mut().zip(p) {
                *s += pj;
            }
        }
        self.prob_rows += terms.probs.len();
        let loss = terms.loss;
        self.phi_b = Some(v.phi_b);
        Ok(Step { loss, bn: bind.bn })
    }

    fn after_backward(&mut self, grads: &Gradients, _batch: &Batch) -> Result<()> {
        let Some(g) = self.phi_b.take().and_then(|v| grads.get(v)) else {
            return Ok(());
        };
        let mu = self.cfg.grad_momentum;
        let e = g.shape()[1];
        let mut sum = vec![0.0; e];
        for r in 0..g.shape()[0] {
            for (s, v) in sum.iter_mut().zip(g.row(r)) {
                *s += v;
            }
        }
        let mut bias = self.store.buffer(BIAS).expect("bias buffer").clone();
        for (b, s) in bias.data_mut().iter_mut().zip(sum) {
            *b = mu * *b + s;
        }
        self.store.set_buffer(BIAS, bias);
        Ok(())
    }

    fn end_epoch(&mut self, _epoch: usize, _data: &TrainSet) -> Result<()> {
        if self.prob_rows == 0 {
            return Ok(());
        }
        let m = self.cfg.running_momentum;
        let n = self.prob_rows as f64;
        let mut running = self.store.buffer(RUNNING).expect("running buffer").clone();
        for (p, s) in running.data_mut().iter_mut().zip(&self.prob_sum) {
            *p = m * *p + (1.0 - m) * s / n;
        }
        self.store.set_buffer(RUNNING, running);
        self.prob_sum.iter_mut().for_each(|s| *s = 0.0);
        self.prob_rows = 0;
        Ok(())
    }
}

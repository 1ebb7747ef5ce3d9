use std::collections::VecDeque;

use pllforge_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::losses::{
    argmax, augment_tensor, contrastive_loss, prototype_argmax, smooth_toward, soft_ce_loss,
    uniform_on_candidates, Strength,
};
use super::{eval_backbone_logits, row, table_tensor, Algorithm, AlgorithmConfig, Batch, Learner, Step, TrainSet};
use crate::error::Result;
use crate::model::{momentum_update, Backbone, BackboneConfig, Bind, ParamId, ParamStore, NORM_EPS};

const SELF_MASK: f64 = -1e9;

/// Contrastive label disambiguation with a momentum key encoder, an
/// embedding queue and class prototypes.
pub struct Pico {
    store: ParamStore,
    online: Backbone,
    shadow: Backbone,
    pairs: Vec<(ParamId, ParamId)>,
    cfg: AlgorithmConfig,
    queue: VecDeque<(Vec<f64>, usize)>,
    soft: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
    seen: Vec<Option<(Vec<f64>, usize)>>,
}

impl Pico {
    pub fn new<R: Rng + ?Sized>(bb: &BackboneConfig, cfg: &AlgorithmConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let online = Backbone::new(&mut store, "net", bb, true, 0, rng)?;
        let start = store.len();
        let shadow = Backbone::new(&mut store, "shadow", bb, true, 0, rng)?;
        store.freeze_from(start);
        let pairs: Vec<(ParamId, ParamId)> = (0..start).map(|i| (ParamId(start + i), ParamId(i))).collect();
        momentum_update(&mut store, &pairs, 0.0);
        Ok(Self {
            store,
            online,
            shadow,
            pairs,
            cfg: cfg.clone(),
            queue: VecDeque::new(),
            soft: Vec::new(),
            prototypes: vec![vec![0.0; bb.embed_dim]; bb.num_classes],
            seen: Vec::new(),
        })
    }

    pub fn soft_labels(&self) -> &[Vec<f64>] {
        &self.soft
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }
}

fn normalized_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0])
        .map(|i| {
            let r = row(t, i);
            let n = (r.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

impl Learner for Pico {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Pico
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        eval_backbone_logits(&self.online, &self.store, x)
    }

    fn begin(&mut self, data: &TrainSet, _epochs: usize) -> Result<()> {
        self.soft = data
            .candidates
            .iter()
            .map(|s| uniform_on_candidates(data.num_classes, s))
            .collect();
        self.seen = vec![None; data.len()];
        self.queue.clear();
        Ok(())
    }

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let mut rng = batch.rng("awgn");
        let xq = augment_tensor(&batch.x, self.cfg.aug_mu, self.cfg.aug_sigma, Strength::Weak, &mut rng);
        let xk = augment_tensor(&batch.x, self.cfg.aug_mu, self.cfg.aug_sigma, Strength::Strong, &mut rng);

        let mut bind = Bind::new(&self.store, vars, true);
        let xqv = t.constant(xq);
        let out = self.online.forward(t, &mut bind, xqv)?;
        let z = out.logits.expect("head");
        let q = t.l2_normalize_rows(out.embedding, NORM_EPS)?;
        let xkv = t.constant(xk);
        let key_out = self.shadow.forward(t, &mut bind, xkv)?;
        let keys = normalized_rows(t.value(key_out.embedding));
        let bn = bind.bn;

        let b = batch.size();
        let zt = t.value(z).clone();
        let preds: Vec<usize> = (0..b).map(|i| argmax(&row(&zt, i))).collect();

        let dim = keys[0].len();
        let mut parts = vec![q];
        let mut labels = preds.clone();
        let mut const_rows: Vec<f64> = keys.iter().flatten().copied().collect();
        labels.extend(&preds);
        for (e, l) in &self.queue {
            const_rows.extend(e);
            labels.push(*l);
        }
        let n_const = const_rows.len() / dim;
        parts.push(t.constant(Tensor::new(vec![n_const, dim], const_rows)?));
        let pool = t.concat(&parts, 0)?;
        let n = labels.len();

        let mut weights = vec![0.0; b * n];
        let mut bias = vec![0.0; b * n];
        for i in 0..b {
            bias[i * n + i] = SELF_MASK;
            let pos: Vec<usize> = (0..n).filter(|&a| a != i && labels[a] == preds[i]).collect();
            for &a in &pos {
                weights[i * n + a] = 1.0 / pos.len() as f64;
            }
        }
        let weights = Tensor::new(vec![b, n], weights)?;
        let bias = Tensor::new(vec![b, n], bias)?;
        let l_co = contrastive_loss(t, q, pool, &weights, &bias, self.cfg.pico_tau)?;
        let s = table_tensor(&self.soft, &batch.indices);
        let l_cl = soft_ce_loss(t, z, &s)?;
        let l_co = t.scale(l_co, self.cfg.pico_lambda)?;
        let loss = t.add(l_cl, l_co)?;

        let qt = t.value(q).clone();
        for (r, &i) in batch.indices.iter().enumerate() {
            self.seen[i] = Some((row(&qt, r), preds[r]));
        }
        for (k, &l) in keys.into_iter().zip(&preds) {
            self.queue.push_back((k, l));
            if self.queue.len() > self.cfg.pico_queue {
                self.queue.pop_front();
            }
        }
        Ok(Step { loss, bn })
    }

    fn after_step(&mut self) -> Result<()> {
        momentum_update(&mut self.store, &self.pairs, self.cfg.pico_momentum);
        Ok(())
    }

    fn end_epoch(&mut self, _epoch: usize, data: &TrainSet) -> Result<()> {
        let c = data.num_classes;
        let dim = self.prototypes[0].len();
        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (q, pred) in self.seen.iter().flatten() {
            counts[*pred] += 1;
            for (s, v) in sums[*pred].iter_mut().zip(q) {
                *s += v;
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                self.prototypes[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        for (i, seen) in self.seen.iter_mut().enumerate() {
            if let Some((q, _)) = seen.take() {
                let k = prototype_argmax(&q, &self.prototypes, &data.candidates[i]);
                smooth_toward(&mut self.soft[i], k, self.cfg.pico_alpha);
            }
        }
        Ok(())
    }

    fn label_table(&self) -> Option<&[Vec<f64>]> {
        Some(&self.soft)
    }
}

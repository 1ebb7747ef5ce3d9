//! Partial-label learners.
//!
//! Each learner owns its parameters, builds its loss on a fresh tape per
//! batch, and updates its disambiguation state at epoch boundaries.

mod comic;
mod cr;
pub mod losses;
pub mod objectives;
mod pico;
mod simple;
mod sst;

use std::sync::Arc;

use pllforge_autodiff::{Gradients, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{LabelSet, PartialDataset};
use crate::error::{CoreError, Result};
use crate::model::{BackboneConfig, BnUpdate, ParamStore};

pub use comic::Comic;
pub use cr::Cr;
pub use pico::Pico;
pub use simple::{Cavl, Dnpl, Lw, NoPll, Proden};
pub use sst::Semantic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    NoPll,
    Dnpl,
    Proden,
    Cavl,
    Lw,
    Cr,
    Pico,
    Sst,
    Hst,
    Comic,
}

impl Algorithm {
    pub const ALL: [Algorithm; 10] = [
        Algorithm::NoPll,
        Algorithm::Dnpl,
        Algorithm::Proden,
        Algorithm::Cavl,
        Algorithm::Lw,
        Algorithm::Cr,
        Algorithm::Pico,
        Algorithm::Sst,
        Algorithm::Hst,
        Algorithm::Comic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::NoPll => "no-pll",
            Algorithm::Dnpl => "dnpl",
            Algorithm::Proden => "proden",
            Algorithm::Cavl => "cavl",
            Algorithm::Lw => "lw",
            Algorithm::Cr => "cr",
            Algorithm::Pico => "pico",
            Algorithm::Sst => "sst",
            Algorithm::Hst => "hst",
            Algorithm::Comic => "comic",
        }
    }

    /// How evaluation turns logits into per-class scores in `[0, 1]`.
    pub fn scoring(self) -> Scoring {
        match self {
            Algorithm::NoPll | Algorithm::Lw | Algorithm::Sst | Algorithm::Hst | Algorithm::Comic => {
                Scoring::Sigmoid
            }
            Algorithm::Dnpl | Algorithm::Proden | Algorithm::Cavl | Algorithm::Pico | Algorithm::Cr => {
                Scoring::SoftmaxRelative
            }
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| CoreError::Invalid(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    /// `σ(z_j)`.
    Sigmoid,
    /// `softmax(z)_j / max_k softmax(z)_k`.
    SoftmaxRelative,
}

impl Scoring {
    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Scoring::Sigmoid => z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            Scoring::SoftmaxRelative => {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                z.iter().map(|&v| (v - max).exp()).collect()
            }
        }
    }
}

/// Hyperparameters of every learner; each learner reads the fields it uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub lw_beta: f64,
    pub cr_lambda: f64,
    pub aug_sigma: f64,
    pub aug_mu: f64,
    pub pico_tau: f64,
    pub pico_alpha: f64,
    pub pico_queue: usize,
    pub pico_lambda: f64,
    pub pico_momentum: f64,
    pub theta_ist: f64,
    pub theta_cst: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub ist_sign: f64,
    pub sst_rank: usize,
    pub sst_dim: usize,
    pub ist_hidden: usize,
    pub ggnn_iterations: usize,
    pub hst_k: usize,
    pub gamma_pn_pos: f64,
    pub gamma_pn_neg: f64,
    pub w_pos: f64,
    pub w_neg: f64,
    pub tau_c: f64,
    pub grad_momentum: f64,
    pub alpha_d: f64,
    pub lambda_m: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub comic_rho: f64,
    pub comic_eta: f64,
    pub comic_groups: usize,
    pub comic_att_dim: usize,
    pub comic_decays: [f64; 3],
    pub running_momentum: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            lw_beta: 1.0,
            cr_lambda: 1.0,
            aug_sigma: 0.1,
            aug_mu: 0.0,
            pico_tau: 0.07,
            pico_alpha: 0.9,
            pico_queue: 1024,
            pico_lambda: 0.5,
            pico_momentum: 0.99,
            theta_ist: 0.5,
            theta_cst: 0.5,
            gamma1: 2.0,
            gamma2: 2.0,
            margin: 0.05,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            ist_sign: -1.0,
            sst_rank: 16,
            sst_dim: 16,
            ist_hidden: 16,
            ggnn_iterations: 3,
            hst_k: 3,
            gamma_pn_pos: 0.0,
            gamma_pn_neg: 2.0,
            w_pos: 1.0,
            w_neg: 1.0,
            tau_c: 0.7,
            grad_momentum: 0.9,
            alpha_d: 1.0,
            lambda_m: 1.0,
            lambda_b: 1.0,
            lambda_c: 1.0,
            comic_rho: 16.0,
            comic_eta: 0.1,
            comic_groups: 2,
            comic_att_dim: 16,
            comic_decays: [1.0, 0.95, 0.90],
            running_momentum: 0.9,
        }
    }
}

impl AlgorithmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Invalid(m.to_string()));
        if !(self.lw_beta >= 0.0 && self.lw_beta.is_finite()) {
            return bad("lw_beta must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.pico_alpha) {
            return bad("pico_alpha must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.pico_momentum) {
            return bad("pico_momentum must lie in [0, 1)");
        }
        if !(self.pico_tau > 0.0) {
            return bad("pico_tau must be positive");
        }
        if !(self.aug_sigma >= 0.0) {
            return bad("aug_sigma must be nonnegative");
        }
        if self.gamma_pn_neg < self.gamma_pn_pos {
            return bad("gamma_pn_neg must be at least gamma_pn_pos");
        }
        if !(self.comic_eta > 0.0) {
            return bad("comic_eta must be positive");
        }
        if self.hst_k == 0 {
            return bad("hst_k must be at least 1");
        }
        if self.ist_sign != 1.0 && self.ist_sign != -1.0 {
            return bad("ist_sign must be 1 or -1");
        }
        for th in [self.theta_ist, self.theta_cst] {
            if !(th > 0.0 && th.is_finite()) {
                return bad("thresholds must be positive");
            }
        }
        Ok(())
    }
}

/// Train-split view handed to learners: inputs and candidate sets only.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub signals: Vec<Arc<[f64]>>,
    pub candidates: Vec<LabelSet>,
    pub leads: usize,
    pub length: usize,
    pub num_classes: usize,
}

impl TrainSet {
    pub fn from_dataset(ds: &PartialDataset) -> Self {
        let idx = ds.train_indices();
        Self {
            signals: idx.iter().map(|&i| ds.records[i].signal.clone()).collect(),
            candidates: idx.iter().map(|&i| ds.records[i].candidate.clone()).collect(),
            leads: ds.leads,
            length: ds.length,
            num_classes: ds.num_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn inputs(&self, idx: &[usize]) -> Tensor {
        stack_signals(idx.iter().map(|&i| &self.signals[i][..]), idx.len(), self.leads, self.length)
    }

    pub fn mask(&self, idx: &[usize]) -> Tensor {
        let sets: Vec<&LabelSet> = idx.iter().map(|&i| &self.candidates[i]).collect();
        losses::mask_tensor(&sets, self.num_classes)
    }

    pub fn candidate_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.candidates {
            for &k in s {
                counts[k] += 1;
            }
        }
        counts
    }
}

pub fn stack_signals<'a>(
    rows: impl Iterator<Item = &'a [f64]>,
    n: usize,
    leads: usize,
    length: usize,
) -> Tensor {
    let mut data = Vec::with_capacity(n * leads * length);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![n, leads, length], data).expect("signal widths validated")
}

/// One minibatch of the train set.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions in the [`TrainSet`].
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub mask: Tensor,
    pub epoch: usize,
    pub epochs: usize,
    pub number: usize,
    pub seed: u64,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// Stream key for randomness drawn while processing this batch.
    pub fn rng(&self, what: &str) -> rand_chacha::ChaCha8Rng {
        crate::rng::keyed(self.seed, &format!("{what}/{}/{}", self.epoch, self.number))
    }
}

pub struct Step {
    pub loss: Var,
    pub bn: Vec<BnUpdate>,
}

pub trait Learner: Send {
    fn algorithm(&self) -> Algorithm;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Per-group learning-rate decay factors, applied as `decay^epoch`.
    fn group_decays(&self) -> Vec<f64> {
        vec![1.0]
    }

    /// Initialises disambiguation state before the first epoch.
    fn begin(&mut self, _data: &TrainSet, _epochs: usize) -> Result<()> {
        Ok(())
    }

    fn loss(&mut self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step>;

    fn after_backward(&mut self, _grads: &Gradients, _batch: &Batch) -> Result<()> {
        Ok(())
    }

    fn after_step(&mut self) -> Result<()> {
        Ok(())
    }

    fn end_epoch(&mut self, _epoch: usize, _data: &TrainSet) -> Result<()> {
        Ok(())
    }

    /// Evaluation-mode logits `[B, C]` for `x: [B, leads, length]`.
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Per-instance target distribution or weight rows, where the learner
    /// keeps one.
    fn label_table(&self) -> Option<&[Vec<f64>]> {
        None
    }
}

/// Builds the learner for `algorithm` with freshly initialised parameters.
pub fn build_learner(
    algorithm: Algorithm,
    cfg: &AlgorithmConfig,
    backbone: &BackboneConfig,
    seed: u64,
) -> Result<Box<dyn Learner>> {
    cfg.validate()?;
    backbone.validate()?;
    let mut rng = crate::rng::keyed(seed, "init");
    Ok(match algorithm {
        Algorithm::NoPll => Box::new(NoPll::new(backbone, &mut rng)?),
        Algorithm::Dnpl => Box::new(Dnpl::new(backbone, &mut rng)?),
        Algorithm::Proden => Box::new(Proden::new(backbone, &mut rng)?),
        Algorithm::Cavl => Box::new(Cavl::new(backbone, &mut rng)?),
        Algorithm::Lw => Box::new(Lw::new(backbone, cfg.lw_beta, &mut rng)?),
        Algorithm::Cr => Box::new(Cr::new(backbone, cfg, &mut rng)?),
        Algorithm::Pico => Box::new(Pico::new(backbone, cfg, &mut rng)?),
        Algorithm::Sst => Box::new(Semantic::new(backbone, cfg, false, seed, &mut rng)?),
        Algorithm::Hst => Box::new(Semantic::new(backbone, cfg, true, seed, &mut rng)?),
        Algorithm::Comic => Box::new(Comic::new(backbone, cfg, &mut rng)?),
    })
}

/// Evaluation-mode pass over a plain backbone with a head.
pub(crate) fn eval_backbone_logits(
    bb: &crate::model::Backbone,
    store: &ParamStore,
    x: &Tensor,
) -> Result<Tensor> {
    let mut t = Tape::new();
    let vars = bind_constants(store, &mut t);
    let mut bind = crate::model::Bind::new(store, &vars, false);
    let xv = t.constant(x.clone());
    let out = bb.forward(&mut t, &mut bind, xv)?;
    Ok(t.value(out.logits.expect("backbone has a head")).clone())
}

pub(crate) fn bind_constants(store: &ParamStore, t: &mut Tape) -> Vec<Var> {
    store.params().iter().map(|p| t.constant(p.value.clone())).collect()
}

/// Row `i` of a `[B, C]` tensor as a vector.
pub(crate) fn row(t: &Tensor, i: usize) -> Vec<f64> {
    let c = t.shape()[1];
    t.data()[i * c..(i + 1) * c].to_vec()
}

pub(crate) fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0])
        .map(|i| {
            let z = row(t, i);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub(crate) fn table_tensor(rows: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let c = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(&rows[i]);
    }
    Tensor::new(vec![idx.len(), c], data).expect("rows share a width")
}

use pllforge_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::losses::kmeans;
use super::objectives::{semantic_objective, Consistency};
use super::{bind_constants, Algorithm, AlgorithmConfig, Batch, Learner, Step, TrainSet};
use crate::data::LabelSet;
use crate::error::Result;
use crate::model::{
    cooccurrence, Backbone, BackboneConfig, Bind, GatedGraphPropagator, Linear, ParamId, ParamStore,
    PerClassClassifier, SemanticDecoupler,
};

const CLASS_EMB: &str = "sst.class_emb";
const ADJ: &str = "sst.adj";
const THRESHOLD_FLOOR: f64 = 1e-3;
const KMEANS_ITERS: usize = 25;
const EVAL_CHUNK: usize = 256;

/// Semantic-aware learner: class-specific features from a bilinear decoupler,
/// refined over the label co-occurrence graph, with instance-level and
/// class-level pseudo labels. The `hierarchical` variant replaces the fixed
/// thresholds with learned per-class ones and scores classes against
/// k-means prototypes.
pub struct Semantic {
    store: ParamStore,
    bb: Backbone,
    decoupler: SemanticDecoupler,
    ggnn: GatedGraphPropagator,
    head: PerClassClassifier,
    pair_hidden: Linear,
    pair_out: Linear,
    theta: Option<(ParamId, ParamId)>,
    cfg: AlgorithmConfig,
    hierarchical: bool,
    seed: u64,
    classes: usize,
    dim: usize,
    seen_phi: Vec<Option<Vec<f64>>>,
    seen_nodes: Vec<Option<Vec<f64>>>,
    /// Per class, up to `hst_k` prototypes of the class-specific feature.
    prototypes: Vec<Vec<Vec<f64>>>,
}

struct Forward {
    phi: Var,
    nodes: Var,
    logits: Var,
}

impl Semantic {
    pub fn new<R: Rng + ?Sized>(
        bb: &BackboneConfig,
        cfg: &AlgorithmConfig,
        hierarchical: bool,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let (c, e, d) = (bb.num_classes, bb.embed_dim, cfg.sst_dim);
        let backbone = Backbone::new(&mut store, "net", bb, false, 0, rng)?;
        let decoupler = SemanticDecoupler::new(&mut store, "decoupler", e, e, cfg.sst_rank, d, 0, rng);
        let ggnn = GatedGraphPropagator::new(&mut store, "ggnn", d, cfg.ggnn_iterations, 0, rng);
        let head = PerClassClassifier::new(&mut store, "cls", c, d, 0, rng);
        let pair_hidden = Linear::new(&mut store, "ist.hidden", 2 * d, cfg.ist_hidden, 0, rng);
        let pair_out = Linear::new(&mut store, "ist.out", cfg.ist_hidden, 1, 0, rng);
        let theta = hierarchical.then(|| {
            (
                store.add("hst.theta_ist", Tensor::full(&[c], cfg.theta_ist), 0),
                store.add("hst.theta_cst", Tensor::full(&[c], cfg.theta_cst), 0),
            )
        });
        store.set_buffer(CLASS_EMB, Tensor::zeros(&[c, e]));
        store.set_buffer(ADJ, Tensor::zeros(&[c, c]));
        Ok(Self {
            store,
            bb: backbone,
            decoupler,
            ggnn,
            head,
            pair_hidden,
            pair_out,
            theta,
            cfg: cfg.clone(),
            hierarchical,
            seed,
            classes: c,
            dim: d,
            seen_phi: Vec::new(),
            seen_nodes: Vec::new(),
            prototypes: vec![Vec::new(); c],
        })
    }

    pub fn prototypes(&self) -> &[Vec<Vec<f64>>] {
        &self.prototypes
    }

    fn forward(&self, t: &mut Tape, bind: &mut Bind, x: &Tensor) -> Result<Forward> {
        let xv = t.constant(x.clone());
        let phi = self.bb.forward(t, bind, xv)?.embedding;
        let emb = t.constant(self.store.buffer(CLASS_EMB).expect("class embeddings").clone());
        let adj = t.constant(self.store.buffer(ADJ).expect("adjacency").clone());
        let nodes = self.decoupler.forward(t, bind, phi, emb)?;
        let refined = self.ggnn.forward(t, bind, nodes, adj)?;
        let logits = self.head.forward(t, bind, refined)?;
        Ok(Forward { phi, nodes, logits })
    }

    /// Pair probabilities `[B, C, C]` from the class-specific features.
    fn pair_probs(&self, t: &mut Tape, bind: &Bind, nodes: Var) -> Result<Var> {
        let (b, c, d) = (t.shape(nodes)[0], self.classes, self.dim);
        let left: Vec<usize> = (0..c * c).map(|i| i / c).collect();
        let right: Vec<usize> = (0..c * c).map(|i| i % c).collect();
        let l = t.index_select(nodes, 1, &left)?;
        let r = t.index_select(nodes, 1, &right)?;
        let pairs = t.concat(&[l, r], 2)?;
        let pairs = t.reshape(pairs, &[b * c * c, 2 * d])?;
        let h = self.pair_hidden.forward(t, bind, pairs)?;
        let h = t.relu(h)?;
        let s = self.pair_out.forward(t, bind, h)?;
        let p = t.sigmoid(s)?;
        Ok(t.reshape(p, &[b, c, c])?)
    }

    /// Eval-mode embeddings and class-specific features for the train set.
    fn features(&self, data: &TrainSet) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut phis = Vec::with_capacity(data.len());
        let mut nodes = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let mut t = Tape::new();
            let vars = bind_constants(&self.store, &mut t);
            let mut bind = Bind::new(&self.store, &vars, false);
            let f = self.forward(&mut t, &mut bind, &data.inputs(chunk))?;
            let pv = t.value(f.phi);
            let nv = t.value(f.nodes);
            let w = self.classes * self.dim;
            for r in 0..chunk.len() {
                phis.push(pv.row(r).to_vec());
                nodes.push(nv.data()[r * w..(r + 1) * w].to_vec());
            }
        }
        Ok((phis, nodes))
    }

    fn refresh_class_embeddings(&mut self, phis: &[Option<Vec<f64>>], cands: &[LabelSet]) {
        let mut emb = self.store.buffer(CLASS_EMB).expect("class embeddings").clone();
        let e = emb.shape()[1];
        let mut sums = vec![vec![0.0; e]; self.classes];
        let mut counts = vec![0usize; self.classes];
        for (phi, cand) in phis.iter().zip(cands) {
            if let Some(phi) = phi {
                for &j in cand {
                    counts[j] += 1;
                    for (s, v) in sums[j].iter_mut().zip(phi) {
                        *s += v;
                    }
                }
            }
        }
        let data = emb.data_mut();
        for j in 0..self.classes {
            if counts[j] > 0 {
                for k in 0..e {
                    data[j * e + k] = sums[j][k] / counts[j] as f64;
                }
            }
        }
        self.store.set_buffer(CLASS_EMB, emb);
    }

    fn refresh_prototypes(&mut self, nodes: &[Option<Vec<f64>>], cands: &[LabelSet], epoch: usize) {
        let d = self.dim;
        let mut rng = crate::rng::keyed(self.seed, &format!("kmeans/{epoch}"));
        for j in 0..self.classes {
            let points: Vec<Vec<f64>> = nodes
                .iter()
                .zip(cands)
                .filter(|(_, c)| c.contains(&j))
                .filter_map(|(n, _)| n.as_ref().map(|n| n[j * d..(j + 1) * d].to_vec()))
                .collect();
            if !points.is_empty() {
                self.prototypes[j] = kmeans(&points, self.cfg.hst_k, KMEANS_ITERS, &mut rng);
            }
        }
    }
}

impl Learner for Semantic {
    fn algorithm(&self) -> Algorithm {
        if self.hierarchical {
            Algorithm::Hst
        } else {
            Algorithm::Sst
        }
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let vars = bind_constants(&self.store, &mut t);
        let mut bind = Bind::new(&self.store, &vars, false);
        let f = self.forward(&mut t, &mut bind, x)?;
        Ok(t.value(f.logits).clone())
    }

    fn begin(&mut self, data: &TrainSet, _epochs: usize) -> Result<()> {
        let sets: Vec<&LabelSet> = data.candidates.iter().collect();
        let adj = cooccurrence(&sets, self.classes);
        self.store.set_buffer(ADJ, Tensor::from_rows(&adj)?);
        let (phis, _) = self.features(data)?;
        let phis: Vec<Option<Vec<f64>>> = phis.into_iter().map(Some).collect();
        self.refresh_class_embeddings(&phis, &data.candidates);
        if self.hierarchical {
            // Features depend on the class embeddings just set.
            let (_, nodes) = self.features(data)?;
            let nodes: Vec<Option<Vec<f64>>> = nodes.into_iter().map(Some).collect();
            self.refresh_prototypes(&nodes, &data.candidates, 0);
        }
        self.seen_phi = vec![None; data.len()];
        self.seen_nodes = vec![None; data.len()];
        Ok(())
    }

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Step> {
        let mut bind = Bind::new(&self.store, vars, true);
        let f = self.forward(t, &mut bind, &batch.x)?;
        let p = self.pair_probs(t, &bind, f.nodes)?;
        let consistency = match self.theta {
            Some((ti, tc)) => Consistency::Prototypes {
                prototypes: &self.prototypes,
                theta_ist: bind.var(ti),
                theta_cst: bind.var(tc),
            },
            None => Consistency::Batch,
        };
        let loss = semantic_objective(t, f.logits, p, f.nodes, &batch.mask, &self.cfg, consistency)?.loss;

        let c = self.classes;
        let phi = t.value(f.phi).clone();
        let nodes = t.value(f.nodes).clone();
        let w = c * self.dim;
        for (r, &i) in batch.indices.iter().enumerate() {
            self.seen_phi[i] = Some(phi.row(r).to_vec());
            if self.hierarchical {
                self.seen_nodes[i] = Some(nodes.data()[r * w..(r + 1) * w].to_vec());
            }
        }
        Ok(Step { loss, bn: bind.bn })
    }

    fn after_step(&mut self) -> Result<()> {
        if let Some((ti, tc)) = self.theta {
            for id in [ti, tc] {
                for v in self.store.get_mut(id).data_mut() {
                    *v = v.clamp(THRESHOLD_FLOOR, 1.0 - THRESHOLD_FLOOR);
                }
            }
        }
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize, data: &TrainSet) -> Result<()> {
        let phis = std::mem::replace(&mut self.seen_phi, vec![None; data.len()]);
        self.refresh_class_embeddings(&phis, &data.candidates);
        if self.hierarchical {
            let nodes = std::mem::replace(&mut self.seen_nodes, vec![None; data.len()]);
            self.refresh_prototypes(&nodes, &data.candidates, epoch + 1);
        }
        Ok(())
    }
}

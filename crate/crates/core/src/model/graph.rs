use pllforge_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::params::{init_uniform, Bind, ParamId, ParamStore};
use crate::data::{LabelSet, PartialDataset, Split};
use crate::error::{invalid, Result};

/// `A[j][k]` = co-occurrences of `j` and `k` in train candidate sets divided
/// by the occurrences of `j`. Rows of never-seen classes are zero.
pub fn build_cooccurrence_adjacency(ds: &PartialDataset) -> Vec<Vec<f64>> {
    let sets: Vec<&LabelSet> = ds
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| &r.candidate)
        .collect();
    cooccurrence(&sets, ds.num_classes())
}

pub fn cooccurrence(sets: &[&LabelSet], c: usize) -> Vec<Vec<f64>> {
    let mut co = vec![vec![0.0; c]; c];
    let mut count = vec![0.0; c];
    for s in sets {
        for &j in s.iter() {
            count[j] += 1.0;
            for &k in s.iter() {
                if k != j {
                    co[j][k] += 1.0;
                }
            }
        }
    }
    for (row, &n) in co.iter_mut().zip(&count) {
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    co
}

#[derive(Clone, Debug)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl Gate {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, group: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init_uniform(&[d, d], d, rng), group),
            u: store.add(format!("{name}.u"), init_uniform(&[d, d], d, rng), group),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d]), group),
        }
    }

    /// `a·W + h·U + b` on flattened node states.
    fn pre(&self, t: &mut Tape, bind: &Bind, a: Var, h: Var) -> Result<Var> {
        let x = t.matmul(a, bind.var(self.w))?;
        let y = t.matmul(h, bind.var(self.u))?;
        let s = t.add(x, y)?;
        Ok(t.add(s, bind.var(self.b))?)
    }
}

/// Gated graph propagation over class nodes with a GRU update.
#[derive(Clone, Debug)]
pub struct GatedGraphPropagator {
    pub iterations: usize,
    dim: usize,
    z: Gate,
    r: Gate,
    h: Gate,
}

impl GatedGraphPropagator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        iterations: usize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            iterations,
            dim,
            z: Gate::new(store, &format!("{name}.z"), dim, group, rng),
            r: Gate::new(store, &format!("{name}.r"), dim, group, rng),
            h: Gate::new(store, &format!("{name}.h"), dim, group, rng),
        }
    }

    /// `nodes: [B, C, D]`, `adj: [C, C]` → `[B, C, D]`.
    pub fn forward(&self, t: &mut Tape, bind: &Bind, nodes: Var, adj: Var) -> Result<Var> {
        let s = t.shape(nodes).to_vec();
        if s.len() != 3 || s[2] != self.dim || t.shape(adj) != [s[1], s[1]] {
            return invalid(format!(
                "propagator expects [B, C, {}] nodes and [C, C] adjacency, got {s:?} and {:?}",
                self.dim,
                t.shape(adj)
            ));
        }
        let (b, c, d) = (s[0], s[1], s[2]);
        let mut h = nodes;
        for _ in 0..self.iterations {
            let by_class = t.permute(h, &[1, 0, 2])?;
            let by_class = t.reshape(by_class, &[c, b * d])?;
            let msg = t.matmul(adj, by_class)?;
            let msg = t.reshape(msg, &[c, b, d])?;
            let msg = t.permute(msg, &[1, 0, 2])?;
            let a = t.reshape(msg, &[b * c, d])?;
            let hf = t.reshape(h, &[b * c, d])?;
            let z = self.z.pre(t, bind, a, hf)?;
            let z = t.sigmoid(z)?;
            let r = self.r.pre(t, bind, a, hf)?;
            let r = t.sigmoid(r)?;
            let rh = t.mul(r, hf)?;
            let cand = self.h.pre(t, bind, a, rh)?;
            let cand = t.tanh(cand)?;
            let keep = t.one_minus(z)?;
            let old = t.mul(keep, hf)?;
            let new = t.mul(z, cand)?;
            let next = t.add(old, new)?;
            h = t.reshape(next, &[b, c, d])?;
        }
        Ok(h)
    }
}

/// One weight vector per class applied to that class's node state.
#[derive(Clone, Debug)]
pub struct PerClassClassifier {
    pub w: ParamId,
    pub b: ParamId,
}

impl PerClassClassifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        classes: usize,
        dim: usize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init_uniform(&[classes, dim], dim, rng), group),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[classes]), group),
        }
    }

    /// `[B, C, D]` → logits `[B, C]`.
    pub fn forward(&self, t: &mut Tape, bind: &Bind, nodes: Var) -> Result<Var> {
        let prod = t.mul(nodes, bind.var(self.w))?;
        let z = t.sum_axis(prod, 2)?;
        Ok(t.add(z, bind.var(self.b))?)
    }
}

use pllforge_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::params::{init_uniform, Bind, ParamId, ParamStore};
use crate::error::{invalid, Result};

/// Low-rank bilinear pooling of an instance embedding with every class
/// embedding: `Pᵀ tanh((Uᵀφ) ⊙ (Vᵀe_j)) + b`.
#[derive(Clone, Debug)]
pub struct SemanticDecoupler {
    pub u: ParamId,
    pub v: ParamId,
    pub p: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub out_dim: usize,
}

impl SemanticDecoupler {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feat_dim: usize,
        class_dim: usize,
        rank: usize,
        out_dim: usize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            u: store.add(format!("{name}.u"), init_uniform(&[feat_dim, rank], feat_dim, rng), group),
            v: store.add(format!("{name}.v"), init_uniform(&[class_dim, rank], class_dim, rng), group),
            p: store.add(format!("{name}.p"), init_uniform(&[rank, out_dim], rank, rng), group),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]), group),
            rank,
            out_dim,
        }
    }

    /// `phi: [B, E]`, `class_emb: [C, E']` → `[B, C, D]`.
    pub fn forward(&self, t: &mut Tape, bind: &Bind, phi: Var, class_emb: Var) -> Result<Var> {
        let (sp, se) = (t.shape(phi).to_vec(), t.shape(class_emb).to_vec());
        if sp.len() != 2 || se.len() != 2 {
            return invalid(format!("decoupler expects matrices, got {sp:?} and {se:?}"));
        }
        let (b, c, r) = (sp[0], se[0], self.rank);
        let ui = t.matmul(phi, bind.var(self.u))?;
        let ui = t.reshape(ui, &[b, 1, r])?;
        let ui = t.repeat(ui, 1, c)?;
        let vj = t.matmul(class_emb, bind.var(self.v))?;
        let joint = t.mul(ui, vj)?;
        let joint = t.tanh(joint)?;
        let flat = t.reshape(joint, &[b * c, r])?;
        let out = t.linear(flat, bind.var(self.p), bind.var(self.b))?;
        Ok(t.reshape(out, &[b, c, self.out_dim])?)
    }
}

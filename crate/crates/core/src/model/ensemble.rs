use pllforge_autodiff::{Tape, Var};
use rand::Rng;

use super::params::{init_uniform, Bind, ParamId, ParamStore};
use crate::error::{invalid, Result};

pub const NORM_EPS: f64 = 1e-12;

/// Additive attention of a query embedding over a set of context embeddings,
/// added back onto the query.
#[derive(Clone, Debug)]
pub struct AttentionFuse {
    pub wq: ParamId,
    pub wk: ParamId,
    pub v: ParamId,
    pub wo: ParamId,
}

impl AttentionFuse {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        att_dim: usize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            wq: store.add(format!("{name}.wq"), init_uniform(&[dim, att_dim], dim, rng), group),
            wk: store.add(format!("{name}.wk"), init_uniform(&[dim, att_dim], dim, rng), group),
            v: store.add(format!("{name}.v"), init_uniform(&[att_dim, 1], att_dim, rng), group),
            wo: store.add(format!("{name}.wo"), init_uniform(&[dim, dim], dim, rng), group),
        }
    }

    /// Returns the fused embedding and the attention weights `[B, n_ctx]`.
    pub fn forward(&self, t: &mut Tape, bind: &Bind, query: Var, ctx: &[Var]) -> Result<(Var, Var)> {
        if ctx.is_empty() {
            return invalid("attention needs at least one context embedding");
        }
        let e = t.shape(query)[1];
        let q = t.matmul(query, bind.var(self.wq))?;
        let mut scores = Vec::with_capacity(ctx.len());
        for &c in ctx {
            let k = t.matmul(c, bind.var(self.wk))?;
            let s = t.add(q, k)?;
            let s = t.tanh(s)?;
            scores.push(t.matmul(s, bind.var(self.v))?);
        }
        let scores = t.concat(&scores, 1)?;
        let alpha = t.softmax(scores, 1)?;
        let mut mixed = None;
        for (i, &c) in ctx.iter().enumerate() {
            let a = t.slice(alpha, 1, i, i + 1)?;
            let a = t.repeat(a, 1, e)?;
            let term = t.mul(a, c)?;
            mixed = Some(match mixed {
                None => term,
                Some(m) => t.add(m, term)?,
            });
        }
        let attn = t.matmul(mixed.expect("context nonempty"), bind.var(self.wo))?;
        Ok((t.add(attn, query)?, alpha))
    }
}

/// Cosine-normalised classifier whose weight vectors are split into `q`
/// groups: `z_c = ρ/q · Σ_k w_{c,k}ᵀφ_k / ((‖w_{c,k}‖ + η)‖φ_k‖)`.
#[derive(Clone, Debug)]
pub struct MultiHeadClassifier {
    /// `[C, E]`.
    pub w: ParamId,
    pub groups: usize,
    pub rho: f64,
    pub eta: f64,
}

impl MultiHeadClassifier {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        classes: usize,
        dim: usize,
        groups: usize,
        rho: f64,
        eta: f64,
        group: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || dim % groups != 0 {
            return invalid(format!("{groups} groups do not divide embedding dimension {dim}"));
        }
        if !(eta > 0.0) {
            return invalid(format!("baseline energy must be positive, got {eta}"));
        }
        Ok(Self {
            w: store.add(format!("{name}.w"), init_uniform(&[classes, dim], dim, rng), group),
            groups,
            rho,
            eta,
        })
    }

    fn group_parts(&self, t: &mut Tape, bind: &Bind, k: usize, dim: usize) -> Result<(Var, Var)> {
        let size = dim / self.groups;
        let wk = t.slice(bind.var(self.w), 1, k * size, (k + 1) * size)?;
        let norm = t.row_norms(wk, NORM_EPS)?;
        let denom = t.add_scalar(norm, self.eta)?;
        Ok((wk, denom))
    }

    /// `phi: [B, E]` → `[B, C]`.
    pub fn forward(&self, t: &mut Tape, bind: &Bind, phi: Var) -> Result<Var> {
        let (b, dim) = (t.shape(phi)[0], t.shape(phi)[1]);
        let c = t.shape(bind.var(self.w))[0];
        let size = dim / self.groups;
        let mut total = None;
        for k in 0..self.groups {
            let (wk, denom) = self.group_parts(t, bind, k, dim)?;
            let pk = t.slice(phi, 1, k * size, (k + 1) * size)?;
            let pn = t.row_norms(pk, NORM_EPS)?;
            let pn = t.reshape(pn, &[b, 1])?;
            let pn = t.repeat(pn, 1, c)?;
            let wt = t.transpose(wk)?;
            let num = t.matmul(pk, wt)?;
            let z = t.div(num, denom)?;
            let z = t.div(z, pn)?;
            total = Some(match total {
                None => z,
                Some(acc) => t.add(acc, z)?,
            });
        }
        Ok(t.scale(total.expect("groups >= 1"), self.rho / self.groups as f64)?)
    }

    /// Adds (`sign = 1`) or subtracts (`sign = −1`) the bias term
    /// `ρ/q · Σ_k cos(φ_k, e_k) · w_{c,k}ᵀe_k / (‖w_{c,k}‖ + η)`. Groups where
    /// `e_k` is zero contribute nothing.
    pub fn bias_adjust(
        &self,
        t: &mut Tape,
        bind: &Bind,
        z: Var,
        phi: Var,
        e: &[f64],
        sign: f64,
    ) -> Result<Var> {
        let (b, dim) = (t.shape(phi)[0], t.shape(phi)[1]);
        if e.len() != dim {
            return invalid(format!("bias vector has {} entries, embedding has {dim}", e.len()));
        }
        let c = t.shape(bind.var(self.w))[0];
        let size = dim / self.groups;
        let mut out = z;
        for k in 0..self.groups {
            let ek = &e[k * size..(k + 1) * size];
            let en = ek.iter().map(|v| v * v).sum::<f64>().sqrt();
            if en == 0.0 {
                continue;
            }
            let ekv = t.constant(pllforge_autodiff::Tensor::new(vec![size, 1], ek.to_vec())?);
            let (wk, denom) = self.group_parts(t, bind, k, dim)?;
            let we = t.matmul(wk, ekv)?;
            let we = t.reshape(we, &[c])?;
            let we = t.div(we, denom)?;
            let pk = t.slice(phi, 1, k * size, (k + 1) * size)?;
            let dot = t.matmul(pk, ekv)?;
            let pn = t.row_norms(pk, NORM_EPS)?;
            let pn = t.reshape(pn, &[b, 1])?;
            let cos = t.div(dot, pn)?;
            let cos = t.scale(cos, 1.0 / en)?;
            let cos = t.repeat(cos, 1, c)?;
            let term = t.mul(cos, we)?;
            let term = t.scale(term, sign * self.rho / self.groups as f64)?;
            out = t.add(out, term)?;
        }
        Ok(out)
    }
}

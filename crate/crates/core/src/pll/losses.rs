//! Loss terms and disambiguation updates shared by the learners.
//!
//! Tape-level functions take logits or probabilities as variables and label
//! information as plain tensors (recorded as constants). Row-wise updates
//! work on plain `f64` slices.

use pllforge_autodiff::{Tape, Tensor, Var, LOG_FLOOR};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::LabelSet;
use crate::error::{invalid, Result};

/// `[B, C]` indicator matrix of label sets.
pub fn mask_tensor(sets: &[&LabelSet], c: usize) -> Tensor {
    let mut data = vec![0.0; sets.len() * c];
    for (i, s) in sets.iter().enumerate() {
        for &k in s.iter() {
            data[i * c + k] = 1.0;
        }
    }
    Tensor::new(vec![sets.len(), c], data).expect("shape matches data")
}

fn check_rows(mask: &Tensor) -> Result<()> {
    let c = mask.shape()[1];
    for i in 0..mask.shape()[0] {
        if mask.data()[i * c..(i + 1) * c].iter().all(|&v| v == 0.0) {
            return invalid(format!("row {i} has an empty label set"));
        }
    }
    Ok(())
}

fn batch_mean(t: &mut Tape, per_row: Var) -> Result<Var> {
    Ok(t.mean(per_row)?)
}

/// `mean_i Σ_j [softplus(z) − y·z]`: binary cross-entropy with every
/// candidate treated as a positive.
pub fn nopll_loss(t: &mut Tape, z: Var, y: &Tensor) -> Result<Var> {
    let yv = t.constant(y.clone());
    let sp = t.softplus(z)?;
    let yz = t.mul(yv, z)?;
    let per = t.sub(sp, yz)?;
    let rows = t.sum_axis(per, 1)?;
    batch_mean(t, rows)
}

/// `−mean_i log Σ_{j∈Y} softmax(z)_j`.
pub fn dnpl_loss(t: &mut Tape, z: Var, mask: &Tensor) -> Result<Var> {
    check_rows(mask)?;
    let m = t.constant(mask.clone());
    let p = t.softmax(z, 1)?;
    let pm = t.mul(p, m)?;
    let mass = t.sum_axis(pm, 1)?;
    let lg = t.log(mass)?;
    let mean = batch_mean(t, lg)?;
    Ok(t.neg(mean)?)
}

/// `−mean_i Σ_j w_{ij} log softmax(z)_j`: cross-entropy against a target
/// distribution.
pub fn soft_ce_loss(t: &mut Tape, z: Var, w: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone());
    let ls = t.log_softmax(z, 1)?;
    let prod = t.mul(wv, ls)?;
    let rows = t.sum_axis(prod, 1)?;
    let mean = batch_mean(t, rows)?;
    Ok(t.neg(mean)?)
}

/// `f_j / Σ_{z∈Y} f_z` on candidates, 0 elsewhere. Falls back to uniform
/// over candidates if the candidate mass vanishes.
pub fn renormalize_on_candidates(probs: &[f64], cand: &LabelSet) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    let mass: f64 = cand.iter().map(|&k| probs[k]).sum();
    for &k in cand {
        out[k] = if mass > 0.0 {
            probs[k] / mass
        } else {
            1.0 / cand.len() as f64
        };
    }
    out
}

pub fn uniform_on_candidates(c: usize, cand: &LabelSet) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for &k in cand {
        out[k] = 1.0 / cand.len() as f64;
    }
    out
}

/// `|f − 1|·f`, selection by argmax over candidates, lowest index on ties.
pub fn cavl_select(outputs: &[f64], cand: &LabelSet) -> usize {
    let mut best = None::<(usize, f64)>;
    for &k in cand {
        let w = (outputs[k] - 1.0).abs() * outputs[k];
        if best.is_none_or(|(_, b)| w > b) {
            best = Some((k, w));
        }
    }
    best.expect("candidate set nonempty").0
}

pub fn one_hot(c: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; c];
    v[k] = 1.0;
    v
}

fn masked_softmax(z: &[f64], keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = z
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; z.len()];
    let mut total = 0.0;
    for (j, &v) in z.iter().enumerate() {
        if keep(j) {
            out[j] = (v - max).exp();
            total += out[j];
        }
    }
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Softmax of the logits within the candidate group and, separately, within
/// the non-candidate group.
pub fn lw_weights(z: &[f64], cand: &LabelSet) -> Vec<f64> {
    let pos = masked_softmax(z, |j| cand.contains(&j));
    let neg = masked_softmax(z, |j| !cand.contains(&j));
    pos.iter()
        .zip(&neg)
        .enumerate()
        .map(|(j, (p, n))| if cand.contains(&j) { *p } else { *n })
        .collect()
}

/// `mean_i [Σ_{j∈Y} w·softplus(−z) + β·Σ_{j∉Y} w·softplus(z)]`.
pub fn lw_loss(t: &mut Tape, z: Var, mask: &Tensor, w: &Tensor, beta: f64) -> Result<Var> {
    let m = t.constant(mask.clone());
    let inv = t.constant(mask.map(|v| 1.0 - v));
    let wv = t.constant(w.clone());
    let nz = t.neg(z)?;
    let pos = t.softplus(nz)?;
    let pos = t.mul(pos, m)?;
    let neg = t.softplus(z)?;
    let neg = t.mul(neg, inv)?;
    let neg = t.scale(neg, beta)?;
    let both = t.add(pos, neg)?;
    let weighted = t.mul(both, wv)?;
    let rows = t.sum_axis(weighted, 1)?;
    batch_mean(t, rows)
}

/// Negative term `Σ_{j∉Y} −log(1 − σ(z_j))`, averaged over the batch.
pub fn cr_negative_loss(t: &mut Tape, z: Var, mask: &Tensor) -> Result<Var> {
    let inv = t.constant(mask.map(|v| 1.0 - v));
    let sp = t.softplus(z)?;
    let neg = t.mul(sp, inv)?;
    let rows = t.sum_axis(neg, 1)?;
    batch_mean(t, rows)
}

/// `mean_i Σ_views KL(p_i ‖ softmax(z_view))`.
pub fn consistency_loss(t: &mut Tape, views: &[Var], target: &Tensor) -> Result<Var> {
    let p = t.constant(target.clone());
    let mut total = None;
    for &z in views {
        let q = t.softmax(z, 1)?;
        let kl = t.kl_div(p, q)?;
        let m = batch_mean(t, kl)?;
        total = Some(match total {
            None => m,
            Some(acc) => t.add(acc, m)?,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => invalid("consistency needs at least one view"),
    }
}

pub fn cr_loss(
    t: &mut Tape,
    z: Var,
    views: &[Var],
    mask: &Tensor,
    target: &Tensor,
    gamma: f64,
) -> Result<Var> {
    let neg = cr_negative_loss(t, z, mask)?;
    let cons = consistency_loss(t, views, target)?;
    let cons = t.scale(cons, gamma)?;
    Ok(t.add(neg, cons)?)
}

/// `γ_t = min(t/T · λ, λ)`.
pub fn cr_gamma(epoch: usize, epochs: usize, lambda: f64) -> f64 {
    (epoch as f64 / epochs.max(1) as f64 * lambda).min(lambda)
}

/// Normalised geometric mean of the view probabilities, restricted to the
/// candidates.
pub fn conformal_target(view_probs: &[&[f64]], cand: &LabelSet) -> Vec<f64> {
    let c = view_probs[0].len();
    let n = view_probs.len() as f64;
    let mut geo = vec![0.0; c];
    for &k in cand {
        let log_mean = view_probs.iter().map(|p| p[k].max(LOG_FLOOR).ln()).sum::<f64>() / n;
        geo[k] = log_mean.exp();
    }
    renormalize_on_candidates(&geo, cand)
}

/// `x + N(μ, σ)` elementwise; `σ = 0` returns `x` unchanged.
pub fn awgn_augment<R: Rng + ?Sized>(x: &[f64], mu: f64, sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 && mu == 0.0 {
        return x.to_vec();
    }
    let normal = Normal::new(mu, sigma.max(0.0)).expect("finite noise parameters");
    x.iter().map(|&v| v + normal.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

impl Strength {
    pub fn multiplier(self) -> f64 {
        match self {
            Strength::Weak => 0.5,
            Strength::Strong => 2.0,
        }
    }
}

pub fn augment_tensor<R: Rng + ?Sized>(
    x: &Tensor,
    mu: f64,
    base_sigma: f64,
    strength: Strength,
    rng: &mut R,
) -> Tensor {
    let data = awgn_augment(x.data(), mu, base_sigma * strength.multiplier(), rng);
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Supervised-contrastive loss of queries against a pool:
/// `−mean_i Σ_a w_{ia} log softmax_a(q_i·pool_a/τ + bias_{ia})`.
/// `weights` rows are the normalised positive indicators, `bias` carries
/// `−1e9` on each query's own entry.
pub fn contrastive_loss(
    t: &mut Tape,
    q: Var,
    pool: Var,
    weights: &Tensor,
    bias: &Tensor,
    tau: f64,
) -> Result<Var> {
    let pt = t.transpose(pool)?;
    let sim = t.matmul(q, pt)?;
    let sim = t.scale(sim, 1.0 / tau)?;
    let b = t.constant(bias.clone());
    let sim = t.add(sim, b)?;
    let ls = t.log_softmax(sim, 1)?;
    let w = t.constant(weights.clone());
    let prod = t.mul(ls, w)?;
    let rows = t.sum_axis(prod, 1)?;
    let mean = batch_mean(t, rows)?;
    Ok(t.neg(mean)?)
}

/// `s ← α·s + (1 − α)·onehot(k)`.
pub fn smooth_toward(s: &mut [f64], k: usize, alpha: f64) {
    for (j, v) in s.iter_mut().enumerate() {
        *v = alpha * *v + if j == k { 1.0 - alpha } else { 0.0 };
    }
}

/// Argmax over candidates of `q·μ_j`, lowest index on ties.
pub fn prototype_argmax(q: &[f64], protos: &[Vec<f64>], cand: &LabelSet) -> usize {
    let mut best = None::<(usize, f64)>;
    for &k in cand {
        let score: f64 = q.iter().zip(&protos[k]).map(|(a, b)| a * b).sum();
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((k, score));
        }
    }
    best.expect("candidate set nonempty").0
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Partial binary cross-entropy on probabilities:
/// `mean_i −(1/|Y_i|)(Σ_{j∈Y} log p_j + Σ_{j∉Y} log(1 − p_j))`.
pub fn partial_bce(t: &mut Tape, p: Var, mask: &Tensor) -> Result<Var> {
    check_rows(mask)?;
    let lp = t.log(p)?;
    let q = t.one_minus(p)?;
    let lq = t.log(q)?;
    partial_bce_terms(t, lp, lq, mask)
}

/// Partial binary cross-entropy on logits, with `log σ(z) = −softplus(−z)`.
pub fn partial_bce_logits(t: &mut Tape, z: Var, mask: &Tensor) -> Result<Var> {
    check_rows(mask)?;
    let nz = t.neg(z)?;
    let lp = t.softplus(nz)?;
    let lp = t.neg(lp)?;
    let lq = t.softplus(z)?;
    let lq = t.neg(lq)?;
    partial_bce_terms(t, lp, lq, mask)
}

fn partial_bce_terms(t: &mut Tape, lp: Var, lq: Var, mask: &Tensor) -> Result<Var> {
    let (b, c) = (mask.shape()[0], mask.shape()[1]);
    let sizes: Vec<f64> = (0..b)
        .map(|i| mask.data()[i * c..(i + 1) * c].iter().sum())
        .collect();
    let m = t.constant(mask.clone());
    let inv = t.constant(mask.map(|v| 1.0 - v));
    let pos = t.mul(lp, m)?;
    let neg = t.mul(lq, inv)?;
    let both = t.add(pos, neg)?;
    let rows = t.sum_axis(both, 1)?;
    let scale = t.constant(Tensor::vector(sizes.iter().map(|s| -1.0 / s).collect()));
    let rows = t.mul(rows, scale)?;
    batch_mean(t, rows)
}

/// Focal-style pair loss over a `[B, C, C]` probability tensor:
/// `sign · mean_i [Σ_{B_i} (1−p)^{γ1} log p + Σ_{∉B_i} max(p−m, 0)^{γ2} log(1−p)]`.
pub fn ist_loss(
    t: &mut Tape,
    p: Var,
    pair_mask: &Tensor,
    gamma1: f64,
    gamma2: f64,
    margin: f64,
    sign: f64,
) -> Result<Var> {
    let inside = t.constant(pair_mask.clone());
    let outside = t.constant(pair_mask.map(|v| 1.0 - v));
    let lp = t.log(p)?;
    let q = t.one_minus(p)?;
    let lq = t.log(q)?;
    let fq = t.powf(q, gamma1)?;
    let pos = t.mul(fq, lp)?;
    let pos = t.mul(pos, inside)?;
    let shifted = t.add_scalar(p, -margin)?;
    let shifted = t.relu(shifted)?;
    let fp = t.powf(shifted, gamma2)?;
    let neg = t.mul(fp, lq)?;
    let neg = t.mul(neg, outside)?;
    let both = t.add(pos, neg)?;
    let b = pair_mask.shape()[0];
    let total = t.sum(both)?;
    Ok(t.scale(total, sign / b as f64)?)
}

/// Multi-focal loss, negated so lower is better:
/// `−mean_i Σ_j [y·(1−p)^{γ⁺_j}·log p + (1−y)·p^{γ⁻_j}·log(1−p)]`.
/// `y` may hold soft targets.
pub fn mfm_loss(
    t: &mut Tape,
    log_p: Var,
    log_1mp: Var,
    y: &Tensor,
    gamma_pos: &[f64],
    gamma_neg: &[f64],
) -> Result<Var> {
    let yv = t.constant(y.clone());
    let inv = t.constant(y.map(|v| 1.0 - v));
    let (pos, neg) = mfm_terms(t, log_p, log_1mp, gamma_pos, gamma_neg)?;
    let pos = t.mul(pos, yv)?;
    let neg = t.mul(neg, inv)?;
    let both = t.add(pos, neg)?;
    let rows = t.sum_axis(both, 1)?;
    let mean = batch_mean(t, rows)?;
    Ok(t.neg(mean)?)
}

/// The unsigned elementwise terms `(1−p)^{γ⁺}·log p` and `p^{γ⁻}·log(1−p)`.
pub fn mfm_terms(
    t: &mut Tape,
    log_p: Var,
    log_1mp: Var,
    gamma_pos: &[f64],
    gamma_neg: &[f64],
) -> Result<(Var, Var)> {
    let gp = t.constant(Tensor::vector(gamma_pos.to_vec()));
    let gn = t.constant(Tensor::vector(gamma_neg.to_vec()));
    let fp = t.mul(log_1mp, gp)?;
    let fp = t.exp(fp)?;
    let pos = t.mul(fp, log_p)?;
    let fn_ = t.mul(log_p, gn)?;
    let fn_ = t.exp(fn_)?;
    let neg = t.mul(fn_, log_1mp)?;
    Ok((pos, neg))
}

/// `1 + ln(max_count / count_j)`, counts floored at 1.
pub fn head_tail_factors(counts: &[usize]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    counts
        .iter()
        .map(|&n| 1.0 + (max / n.max(1) as f64).ln())
        .collect()
}

/// `κ_x = L_x^α / (L_h^α + L_t^α)`; both zero gives equal weights.
pub fn balance_weights(loss_h: f64, loss_t: f64, alpha: f64) -> (f64, f64) {
    let (a, b) = (loss_h.max(0.0).powf(alpha), loss_t.max(0.0).powf(alpha));
    if a + b == 0.0 {
        (0.5, 0.5)
    } else {
        (a / (a + b), b / (a + b))
    }
}

/// Corrected labels: `p_j > max(τ, P_j)` and `j` a candidate.
pub fn correct_labels(p: &[f64], cand: &LabelSet, tau: f64, running: &[f64]) -> Vec<bool> {
    p.iter()
        .enumerate()
        .map(|(j, &pj)| cand.contains(&j) && pj > tau.max(running[j]))
        .collect()
}

/// Correction loss on `[B, C]` logits. Corrected entries contribute the
/// positive focal term, the rest contribute the positive term for candidates
/// plus the negative term. Entries are scaled by the head–tail factor and the
/// sum is divided by the number of corrected labels (0 when none).
pub fn correction_loss(
    t: &mut Tape,
    z: Var,
    mask: &Tensor,
    corrected: &Tensor,
    gamma_pos: &[f64],
    gamma_neg: &[f64],
    ht: &[f64],
) -> Result<Var> {
    let n_t: f64 = corrected.data().iter().sum();
    if n_t == 0.0 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let nz = t.neg(z)?;
    let lp = t.softplus(nz)?;
    let lp = t.neg(lp)?;
    let lq = t.softplus(z)?;
    let lq = t.neg(lq)?;
    let (pos, neg) = mfm_terms(t, lp, lq, gamma_pos, gamma_neg)?;
    // Both branches take the positive term on every candidate (corrected
    // labels are candidates); only uncorrected entries add the negative term.
    let m = t.constant(mask.clone());
    let uncorrected = t.constant(corrected.map(|v| 1.0 - v));
    let pos = t.mul(pos, m)?;
    let neg = t.mul(neg, uncorrected)?;
    let both = t.add(pos, neg)?;
    let h = t.constant(Tensor::vector(ht.to_vec()));
    let both = t.mul(both, h)?;
    let total = t.sum(both)?;
    Ok(t.scale(total, -1.0 / n_t)?)
}

/// Lloyd's k-means with k-means++ seeding. `k` is reduced to the number of
/// points when fewer are available.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let k = k.min(points.len());
    if k == 0 {
        return Vec::new();
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[next].clone());
    }
    let dim = points[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = dist2(p, c);
                if d < bd {
                    bd = d;
                    best = ci;
                }
            }
            counts[best] += 1;
            for (s, v) in sums[best].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = false;
        for ci in 0..k {
            if counts[ci] > 0 {
                let next: Vec<f64> = sums[ci].iter().map(|s| s / counts[ci] as f64).collect();
                if next != centers[ci] {
                    moved = true;
                    centers[ci] = next;
                }
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

/// Cosine similarity on plain slices; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

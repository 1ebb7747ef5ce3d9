//! Complete objectives of the semantic and three-expert learners, written
//! against model outputs so they can be evaluated without the networks.

use pllforge_autodiff::{Tape, Tensor, Var};

use super::losses::{
    balance_weights, correct_labels, correction_loss, ist_loss, mask_tensor, mfm_loss, partial_bce,
    partial_bce_logits,
};
use super::simple::mask_row_set;
use super::{softmax_rows, AlgorithmConfig};
use crate::data::LabelSet;
use crate::error::Result;
use crate::model::NORM_EPS;

const PROB_FLOOR: f64 = 1e-7;

/// Class-level consistency variant.
pub enum Consistency<'a> {
    /// Cosine agreement with the same-class features of other batch members
    /// sharing that candidate, thresholded at `theta_cst`.
    Batch,
    /// Mean cosine to per-class prototypes with learned thresholds `[C]`.
    Prototypes {
        prototypes: &'a [Vec<Vec<f64>>],
        theta_ist: Var,
        theta_cst: Var,
    },
}

pub struct SemanticTerms {
    pub loss: Var,
    pub classification: Var,
    pub ist: Var,
    pub cst: Var,
    pub dtl: Option<Var>,
    pub ist_pseudo: Vec<Vec<bool>>,
    pub cst_pseudo: Vec<Vec<bool>>,
}

/// `[B, C, C]` indicator of candidate pairs `(j, k)`, diagonal included.
pub fn pair_mask(cands: &[LabelSet], c: usize) -> Tensor {
    let mut pm = vec![0.0; cands.len() * c * c];
    for (i, cand) in cands.iter().enumerate() {
        for &j in cand {
            for &k in cand {
                pm[i * c * c + j * c + k] = 1.0;
            }
        }
    }
    Tensor::new(vec![cands.len(), c, c], pm).expect("shape matches data")
}

/// Instance scores `Σ_{j∈Y_i} p(k, j)` as a `[B, C]` variable.
pub fn ist_scores(t: &mut Tape, pairs: Var, mask: &Tensor) -> Result<Var> {
    let (b, c) = (mask.shape()[0], mask.shape()[1]);
    let mut m = Vec::with_capacity(b * c * c);
    for i in 0..b {
        for _ in 0..c {
            m.extend_from_slice(mask.row(i));
        }
    }
    let m = t.constant(Tensor::new(vec![b, c, c], m)?);
    let hit = t.mul(pairs, m)?;
    Ok(t.sum_axis(hit, 2)?)
}

fn unit_nodes(t: &mut Tape, nodes: Var) -> Result<Var> {
    let s = t.shape(nodes).to_vec();
    let flat = t.reshape(nodes, &[s[0] * s[1], s[2]])?;
    let unit = t.l2_normalize_rows(flat, NORM_EPS)?;
    Ok(t.reshape(unit, &s)?)
}

/// Within-batch cosine consistency over `nodes: [B, C, D]`: pseudo labels
/// from the mean cosine to `D_j ∖ {i}` and the loss `1 − mean s` over triples
/// `(i, j, z)` with `j ∈ Y_i ∩ Y_z`, `z ≠ i`.
pub fn batch_consistency(
    t: &mut Tape,
    nodes: Var,
    cands: &[LabelSet],
    theta: f64,
) -> Result<(Var, Vec<Vec<bool>>)> {
    let s = t.shape(nodes).to_vec();
    let (b, c, d) = (s[0], s[1], s[2]);
    let unit = unit_nodes(t, nodes)?;
    let mut pseudo = vec![vec![false; c]; b];
    let mut total: Option<Var> = None;
    let mut triples = 0usize;
    for j in 0..c {
        let members: Vec<usize> = (0..b).filter(|&z| cands[z].contains(&j)).collect();
        if members.is_empty() {
            continue;
        }
        let xj = t.slice(unit, 1, j, j + 1)?;
        let xj = t.reshape(xj, &[b, d])?;
        let xt = t.transpose(xj)?;
        let sim = t.matmul(xj, xt)?;
        let sv = t.value(sim).clone();
        let mut m = vec![0.0; b * b];
        for i in 0..b {
            let others: Vec<usize> = members.iter().copied().filter(|&z| z != i).collect();
            if others.is_empty() {
                continue;
            }
            let mean = others.iter().map(|&z| sv.data()[i * b + z]).sum::<f64>() / others.len() as f64;
            pseudo[i][j] = mean >= theta;
            if cands[i].contains(&j) {
                for &z in &others {
                    m[i * b + z] = 1.0;
                    triples += 1;
                }
            }
        }
        let mv = t.constant(Tensor::new(vec![b, b], m)?);
        let hit = t.mul(sim, mv)?;
        let hit = t.sum(hit)?;
        total = Some(match total {
            Some(acc) => t.add(acc, hit)?,
            None => hit,
        });
    }
    let loss = match total {
        Some(sum) if triples > 0 => {
            let neg = t.scale(sum, -1.0 / triples as f64)?;
            t.add_scalar(neg, 1.0)?
        }
        _ => t.constant(Tensor::scalar(0.0)),
    };
    Ok((loss, pseudo))
}

/// Mean cosine of each class-specific feature to its class prototypes,
/// `[B, C]`, plus a mask of the classes that have prototypes.
pub fn prototype_scores(t: &mut Tape, nodes: Var, prototypes: &[Vec<Vec<f64>>]) -> Result<(Var, Vec<bool>)> {
    let s = t.shape(nodes).to_vec();
    let (b, c, d) = (s[0], s[1], s[2]);
    let unit = unit_nodes(t, nodes)?;
    let mut cols = Vec::with_capacity(c);
    let mut has = vec![false; c];
    for (j, protos) in prototypes.iter().enumerate().take(c) {
        if protos.is_empty() {
            cols.push(t.constant(Tensor::zeros(&[b, 1])));
            continue;
        }
        has[j] = true;
        let xj = t.slice(unit, 1, j, j + 1)?;
        let xj = t.reshape(xj, &[b, d])?;
        let k = protos.len();
        let mut pd = vec![0.0; d * k];
        for (pi, p) in protos.iter().enumerate() {
            let n = (p.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            for dd in 0..d {
                pd[dd * k + pi] = p[dd] / n;
            }
        }
        let pm = t.constant(Tensor::new(vec![d, k], pd)?);
        let sim = t.matmul(xj, pm)?;
        let sim = t.mean_axis(sim, 1)?;
        cols.push(t.reshape(sim, &[b, 1])?);
    }
    Ok((t.concat(&cols, 1)?, has))
}

/// Partial BCE on the rows whose pseudo set is nonempty.
fn pseudo_term(t: &mut Tape, z: Var, pseudo: &[Vec<bool>]) -> Result<Option<Var>> {
    let rows: Vec<usize> = (0..pseudo.len()).filter(|&i| pseudo[i].iter().any(|&v| v)).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let sets: Vec<LabelSet> = rows
        .iter()
        .map(|&i| pseudo[i].iter().enumerate().filter(|(_, &v)| v).map(|(j, _)| j).collect())
        .collect();
    let refs: Vec<&LabelSet> = sets.iter().collect();
    let mask = mask_tensor(&refs, pseudo[0].len());
    let zr = t.index_select(z, 0, &rows)?;
    Ok(Some(partial_bce_logits(t, zr, &mask)?))
}

fn add_scaled(t: &mut Tape, acc: Var, term: Var, w: f64) -> Result<Var> {
    let s = t.scale(term, w)?;
    Ok(t.add(acc, s)?)
}

/// `L_cls + λ1·L_ist + λ2·L_cst [+ λ3·L_dtl]` from logits `[B, C]`, pair
/// probabilities `[B, C, C]` and class-specific features `[B, C, D]`.
pub fn semantic_objective(
    t: &mut Tape,
    logits: Var,
    pairs: Var,
    nodes: Var,
    mask: &Tensor,
    cfg: &AlgorithmConfig,
    consistency: Consistency<'_>,
) -> Result<SemanticTerms> {
    let (b, c) = (mask.shape()[0], mask.shape()[1]);
    let cands: Vec<LabelSet> = (0..b).map(|r| mask_row_set(mask, r)).collect();
    let pm = pair_mask(&cands, c);
    let ist = ist_loss(t, pairs, &pm, cfg.gamma1, cfg.gamma2, cfg.margin, cfg.ist_sign)?;
    let score_var = ist_scores(t, pairs, mask)?;
    let score = t.value(score_var).data().to_vec();

    let (ist_pseudo, cst, cst_pseudo, dtl) = match consistency {
        Consistency::Batch => {
            let ist_pseudo = (0..b)
                .map(|i| (0..c).map(|k| score[i * c + k] >= cfg.theta_ist).collect())
                .collect();
            let (cst, pseudo) = batch_consistency(t, nodes, &cands, cfg.theta_cst)?;
            (ist_pseudo, cst, pseudo, None)
        }
        Consistency::Prototypes {
            prototypes,
            theta_ist,
            theta_cst,
        } => {
            let ti = t.value(theta_ist).clone();
            let tc = t.value(theta_cst).clone();
            let ist_pseudo = (0..b)
                .map(|i| (0..c).map(|k| score[i * c + k] >= ti.data()[k]).collect())
                .collect();
            let (s, has) = prototype_scores(t, nodes, prototypes)?;
            let sv = t.value(s).clone();
            let mut m = vec![0.0; b * c];
            let mut count = 0usize;
            let mut pseudo = vec![vec![false; c]; b];
            for i in 0..b {
                for j in (0..c).filter(|&j| has[j]) {
                    pseudo[i][j] = sv.data()[i * c + j] >= tc.data()[j];
                    if cands[i].contains(&j) {
                        m[i * c + j] = 1.0;
                        count += 1;
                    }
                }
            }
            let cst = if count > 0 {
                let mv = t.constant(Tensor::new(vec![b, c], m)?);
                let hit = t.mul(s, mv)?;
                let hit = t.sum(hit)?;
                let neg = t.scale(hit, -1.0 / count as f64)?;
                t.add_scalar(neg, 1.0)?
            } else {
                t.constant(Tensor::scalar(0.0))
            };
            let d_ist = t.sub(score_var, theta_ist)?;
            let d_ist = t.sigmoid(d_ist)?;
            let d_cst = t.sub(s, theta_cst)?;
            let d_cst = t.sigmoid(d_cst)?;
            let l1 = partial_bce(t, d_ist, mask)?;
            let l2 = partial_bce(t, d_cst, mask)?;
            (ist_pseudo, cst, pseudo, Some(t.add(l1, l2)?))
        }
    };

    let mut classification = partial_bce_logits(t, logits, mask)?;
    for pseudo in [&ist_pseudo, &cst_pseudo] {
        if let Some(term) = pseudo_term(t, logits, pseudo)? {
            classification = t.add(classification, term)?;
        }
    }
    let mut loss = add_scaled(t, classification, ist, cfg.lambda1)?;
    loss = add_scaled(t, loss, cst, cfg.lambda2)?;
    if let Some(dtl) = dtl {
        loss = add_scaled(t, loss, dtl, cfg.lambda3)?;
    }
    Ok(SemanticTerms {
        loss,
        classification,
        ist,
        cst,
        dtl,
        ist_pseudo,
        cst_pseudo,
    })
}

/// Per-class focal exponents and head–tail factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalFactors {
    pub gamma_pos: Vec<f64>,
    pub gamma_neg: Vec<f64>,
    pub ht: Vec<f64>,
}

impl FocalFactors {
    /// `γ± = γpn± + w±·ht`.
    pub fn new(ht: Vec<f64>, cfg: &AlgorithmConfig) -> Self {
        Self {
            gamma_pos: ht.iter().map(|h| cfg.gamma_pn_pos + cfg.w_pos * h).collect(),
            gamma_neg: ht.iter().map(|h| cfg.gamma_pn_neg + cfg.w_neg * h).collect(),
            ht,
        }
    }
}

pub struct ComicTerms {
    pub loss: Var,
    pub modification: Var,
    pub balance: Var,
    pub correction: Var,
    pub kappa: (f64, f64),
    /// `σ(z_b)` per row, used for the running class means.
    pub probs: Vec<Vec<f64>>,
    pub corrected: Tensor,
}

/// `log σ(z)` and `log(1 − σ(z))` in softplus form.
fn log_sigmoid_pair(t: &mut Tape, z: Var) -> Result<(Var, Var)> {
    let nz = t.neg(z)?;
    let lp = t.softplus(nz)?;
    let lp = t.neg(lp)?;
    let lq = t.softplus(z)?;
    let lq = t.neg(lq)?;
    Ok((lp, lq))
}

/// Multi-focal loss of sigmoid outputs against `y`.
pub fn mfm_sigmoid(t: &mut Tape, z: Var, y: &Tensor, f: &FocalFactors) -> Result<Var> {
    let (lp, lq) = log_sigmoid_pair(t, z)?;
    mfm_loss(t, lp, lq, y, &f.gamma_pos, &f.gamma_neg)
}

/// Multi-focal loss of the student's softmax against a teacher's softmax;
/// the teacher is not differentiated.
pub fn distill(t: &mut Tape, student: Var, teacher: &Tensor, f: &FocalFactors) -> Result<Var> {
    let lp = t.log_softmax(student, 1)?;
    let p = t.softmax(student, 1)?;
    let q = t.one_minus(p)?;
    let q = t.clamp(q, PROB_FLOOR, 1.0)?;
    let lq = t.log(q)?;
    let target = Tensor::from_rows(&softmax_rows(teacher))?;
    mfm_loss(t, lp, lq, &target, &f.gamma_pos, &f.gamma_neg)
}

/// `λ_m·L_m + λ_b·L_b + λ_c·L_c` from the bias-adjusted head and tail logits
/// and the balanced logits, all `[B, C]`.
#[allow(clippy::too_many_arguments)]
pub fn comic_objective(
    t: &mut Tape,
    z_h: Var,
    z_t: Var,
    z_b: Var,
    mask: &Tensor,
    running: &[f64],
    f: &FocalFactors,
    cfg: &AlgorithmConfig,
) -> Result<ComicTerms> {
    let l_h = mfm_sigmoid(t, z_h, mask, f)?;
    let l_t = mfm_sigmoid(t, z_t, mask, f)?;
    let l_bm = mfm_sigmoid(t, z_b, mask, f)?;
    let kappa = balance_weights(t.scalar(l_h), t.scalar(l_t), cfg.alpha_d);
    let l_m = t.add(l_h, l_t)?;
    let modification = t.add(l_m, l_bm)?;

    let zh = t.value(z_h).clone();
    let zt = t.value(z_t).clone();
    let d_h = distill(t, z_b, &zh, f)?;
    let d_t = distill(t, z_b, &zt, f)?;
    let d_h = t.scale(d_h, kappa.0)?;
    let d_t = t.scale(d_t, kappa.1)?;
    let balance = t.add(d_h, d_t)?;

    let zb = t.value(z_b).clone();
    let (b, c) = (mask.shape()[0], mask.shape()[1]);
    let probs: Vec<Vec<f64>> = (0..b)
        .map(|r| zb.row(r).iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
        .collect();
    let mut flags = Vec::with_capacity(b * c);
    for (r, p) in probs.iter().enumerate() {
        let cand = mask_row_set(mask, r);
        flags.extend(
            correct_labels(p, &cand, cfg.tau_c, running)
                .into_iter()
                .map(|v| if v { 1.0 } else { 0.0 }),
        );
    }
    let corrected = Tensor::new(vec![b, c], flags)?;
    let correction = correction_loss(t, z_b, mask, &corrected, &f.gamma_pos, &f.gamma_neg, &f.ht)?;

    let a = t.scale(modification, cfg.lambda_m)?;
    let bl = t.scale(balance, cfg.lambda_b)?;
    let cl = t.scale(correction, cfg.lambda_c)?;
    let loss = t.add(a, bl)?;
    let loss = t.add(loss, cl)?;
    Ok(ComicTerms {
        loss,
        modification,
        balance,
        correction,
        kappa,
        probs,
        corrected,
    })
}

//! Straight-from-formula scalar versions of every learner objective, and a
//! suite comparing them with the tape implementations on small fixtures.

use pllforge_autodiff::{Tape, Tensor};
use pllforge_core::data::LabelSet;
use pllforge_core::pll::losses::{
    cavl_select, conformal_target, contrastive_loss, cr_gamma, cr_loss, dnpl_loss, head_tail_factors, lw_loss,
    lw_weights, mask_tensor, one_hot, renormalize_on_candidates, soft_ce_loss,
};
use pllforge_core::pll::objectives::{comic_objective, semantic_objective, Consistency, FocalFactors};
use pllforge_core::pll::AlgorithmConfig;

use super::{cos, dot, eval, mat, set, sigmoid, softmax};

pub const LOGITS: [[f64; 3]; 4] = [[0.3, -1.2, 0.8], [1.5, 0.2, -0.4], [-0.7, 0.9, 0.1], [0.05, -0.3, 1.1]];
pub const LOGITS_B: [[f64; 3]; 4] = [[1.0, 0.2, -0.5], [0.1, 0.4, 0.3], [-0.2, -0.6, 0.9], [0.7, 0.0, -0.1]];
pub const LOGITS_C: [[f64; 3]; 4] = [[-0.4, 0.6, 0.2], [0.9, -0.8, 0.5], [0.3, 1.2, -1.0], [-0.1, 0.4, 0.8]];

pub fn candidates() -> Vec<LabelSet> {
    vec![set(&[0, 2]), set(&[0]), set(&[1, 2]), set(&[0, 1, 2])]
}

pub fn rows(m: &[[f64; 3]; 4]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.to_vec()).collect()
}

pub fn tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn mask(cands: &[LabelSet], c: usize) -> Tensor {
    let refs: Vec<&LabelSet> = cands.iter().collect();
    mask_tensor(&refs, c)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ln_sigmoid(z: f64) -> f64 {
    -(1.0 + (-z).exp()).ln()
}

fn ln_one_minus_sigmoid(z: f64) -> f64 {
    -(1.0 + z.exp()).ln()
}

pub fn oracle_dnpl(z: &[Vec<f64>], y: &[LabelSet]) -> f64 {
    mean(z.iter().zip(y).map(|(zi, yi)| {
        let p = softmax(zi);
        -yi.iter().map(|&j| p[j]).sum::<f64>().ln()
    }))
}

pub fn oracle_weighted_ce(z: &[Vec<f64>], w: &[Vec<f64>]) -> f64 {
    mean(z.iter().zip(w).map(|(zi, wi)| {
        let p = softmax(zi);
        -wi.iter().zip(&p).map(|(w, p)| w * p.ln()).sum::<f64>()
    }))
}

pub fn oracle_proden_weights(f: &[f64], y: &LabelSet) -> Vec<f64> {
    let total: f64 = y.iter().map(|&j| f[j]).sum();
    (0..f.len()).map(|j| if y.contains(&j) { f[j] / total } else { 0.0 }).collect()
}

pub fn oracle_cavl_choice(f: &[f64], y: &LabelSet) -> usize {
    let mut best = usize::MAX;
    let mut score = f64::NEG_INFINITY;
    for j in 0..f.len() {
        if !y.contains(&j) {
            continue;
        }
        let w = (f[j] - 1.0).abs() * f[j];
        if w > score {
            score = w;
            best = j;
        }
    }
    best
}

pub fn oracle_lw(z: &[Vec<f64>], y: &[LabelSet], beta: f64) -> f64 {
    mean(z.iter().zip(y).map(|(zi, yi)| {
        let group = |inside: bool| -> Vec<(usize, f64)> {
            let idx: Vec<usize> = (0..zi.len()).filter(|j| yi.contains(j) == inside).collect();
            if idx.is_empty() {
                return Vec::new();
            }
            let sm = softmax(&idx.iter().map(|&j| zi[j]).collect::<Vec<_>>());
            idx.into_iter().zip(sm).collect()
        };
        let pos: f64 = group(true).iter().map(|&(j, w)| w * (1.0 + (-zi[j]).exp()).ln()).sum();
        let neg: f64 = group(false).iter().map(|&(j, w)| w * (1.0 + zi[j].exp()).ln()).sum();
        pos + beta * neg
    }))
}

pub fn oracle_conformal(views: &[Vec<f64>], y: &LabelSet) -> Vec<f64> {
    let c = views[0].len();
    let geo: Vec<f64> = (0..c)
        .map(|j| {
            if y.contains(&j) {
                views.iter().map(|p| p[j]).product::<f64>().powf(1.0 / views.len() as f64)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = geo.iter().sum();
    geo.into_iter().map(|g| g / total).collect()
}

pub fn oracle_cr(z: &[Vec<f64>], views: &[Vec<Vec<f64>>], y: &[LabelSet], target: &[Vec<f64>], gamma: f64) -> f64 {
    let neg = mean(z.iter().zip(y).map(|(zi, yi)| {
        (0..zi.len())
            .filter(|j| !yi.contains(j))
            .map(|j| -(1.0 - sigmoid(zi[j])).ln())
            .sum::<f64>()
    }));
    let mut cons = 0.0;
    for v in views {
        cons += mean(v.iter().zip(target).map(|(zv, p)| {
            let q = softmax(zv);
            p.iter()
                .zip(&q)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p / q).ln())
                .sum::<f64>()
        }));
    }
    neg + gamma * cons
}

/// `q` rows are the queries, scored against `pool` rows; `positive[i]` lists
/// the pool indices sharing query `i`'s label. Pool row `i` is the query itself.
pub fn oracle_contrastive(q: &[Vec<f64>], pool: &[Vec<f64>], positive: &[Vec<usize>], tau: f64) -> f64 {
    mean(q.iter().enumerate().map(|(i, qi)| {
        let logit = |a: usize| dot(qi, &pool[a]) / tau;
        let denom: f64 = (0..pool.len()).filter(|&a| a != i).map(|a| logit(a).exp()).sum();
        let pos = &positive[i];
        -pos.iter().map(|&a| logit(a) - denom.ln()).sum::<f64>() / pos.len() as f64
    }))
}

/// `−(1/|S|)(Σ_{S} log p + Σ_{∉S} log(1 − p))` averaged over rows.
pub fn oracle_partial_bce(p: &[Vec<f64>], s: &[LabelSet]) -> f64 {
    mean(p.iter().zip(s).map(|(pi, si)| {
        let total: f64 = (0..pi.len())
            .map(|j| if si.contains(&j) { pi[j].ln() } else { (1.0 - pi[j]).ln() })
            .sum();
        -total / si.len() as f64
    }))
}

fn oracle_partial_bce_logits(z: &[Vec<f64>], s: &[LabelSet]) -> f64 {
    mean(z.iter().zip(s).map(|(zi, si)| {
        let total: f64 = (0..zi.len())
            .map(|j| if si.contains(&j) { ln_sigmoid(zi[j]) } else { ln_one_minus_sigmoid(zi[j]) })
            .sum();
        -total / si.len() as f64
    }))
}

/// Partial BCE restricted to rows with a nonempty pseudo set; `None` when
/// every set is empty.
fn oracle_pseudo(z: &[Vec<f64>], pseudo: &[LabelSet]) -> Option<f64> {
    let (zs, ss): (Vec<Vec<f64>>, Vec<LabelSet>) = z
        .iter()
        .zip(pseudo)
        .filter(|(_, s)| !s.is_empty())
        .map(|(a, b)| (a.clone(), b.clone()))
        .unzip();
    (!zs.is_empty()).then(|| oracle_partial_bce_logits(&zs, &ss))
}

/// `p[i][j][k]` pair probabilities.
pub type Pairs = Vec<Vec<Vec<f64>>>;
/// `nodes[i][j]` class-specific feature.
pub type Nodes = Vec<Vec<Vec<f64>>>;

pub fn oracle_ist_loss(p: &Pairs, y: &[LabelSet], cfg: &AlgorithmConfig) -> f64 {
    let mut total = 0.0;
    for (pi, yi) in p.iter().zip(y) {
        for (j, row) in pi.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                total += if yi.contains(&j) && yi.contains(&k) {
                    (1.0 - v).powf(cfg.gamma1) * v.ln()
                } else {
                    (v - cfg.margin).max(0.0).powf(cfg.gamma2) * (1.0 - v).ln()
                };
            }
        }
    }
    cfg.ist_sign * total / p.len() as f64
}

pub fn oracle_ist_score(p: &Pairs, y: &[LabelSet]) -> Vec<Vec<f64>> {
    p.iter()
        .zip(y)
        .map(|(pi, yi)| pi.iter().map(|row| yi.iter().map(|&j| row[j]).sum()).collect())
        .collect()
}

/// Mean cosine of `nodes[i][j]` to the same-class features of the other
/// members of `D_j`; `None` when `D_j ∖ {i}` is empty.
pub fn oracle_batch_cosine(nodes: &Nodes, y: &[LabelSet]) -> Vec<Vec<Option<f64>>> {
    let b = nodes.len();
    let c = nodes[0].len();
    (0..b)
        .map(|i| {
            (0..c)
                .map(|j| {
                    let others: Vec<usize> = (0..b).filter(|&z| z != i && y[z].contains(&j)).collect();
                    (!others.is_empty())
                        .then(|| others.iter().map(|&z| cos(&nodes[i][j], &nodes[z][j])).sum::<f64>() / others.len() as f64)
                })
                .collect()
        })
        .collect()
}

pub fn oracle_batch_cst(nodes: &Nodes, y: &[LabelSet]) -> f64 {
    let b = nodes.len();
    let mut sims = Vec::new();
    for i in 0..b {
        for &j in &y[i] {
            for z in (0..b).filter(|&z| z != i && y[z].contains(&j)) {
                sims.push(cos(&nodes[i][j], &nodes[z][j]));
            }
        }
    }
    if sims.is_empty() {
        0.0
    } else {
        1.0 - mean(sims.into_iter())
    }
}

pub fn oracle_prototype_score(nodes: &Nodes, protos: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    nodes
        .iter()
        .map(|ni| {
            ni.iter()
                .zip(protos)
                .map(|(x, ps)| mean(ps.iter().map(|p| cos(x, p))))
                .collect()
        })
        .collect()
}

fn sets_from(flags: impl Iterator<Item = Vec<bool>>) -> Vec<LabelSet> {
    flags
        .map(|r| r.iter().enumerate().filter(|(_, &v)| v).map(|(j, _)| j).collect())
        .collect()
}

pub fn oracle_sst(z: &[Vec<f64>], p: &Pairs, nodes: &Nodes, y: &[LabelSet], cfg: &AlgorithmConfig) -> f64 {
    let score = oracle_ist_score(p, y);
    let ist_pseudo = sets_from(score.iter().map(|r| r.iter().map(|&s| s >= cfg.theta_ist).collect()));
    let cosines = oracle_batch_cosine(nodes, y);
    let cst_pseudo = sets_from(
        cosines
            .iter()
            .map(|r| r.iter().map(|s| s.is_some_and(|s| s >= cfg.theta_cst)).collect()),
    );
    let mut cls = oracle_partial_bce_logits(z, y);
    cls += oracle_pseudo(z, &ist_pseudo).unwrap_or(0.0);
    cls += oracle_pseudo(z, &cst_pseudo).unwrap_or(0.0);
    cls + cfg.lambda1 * oracle_ist_loss(p, y, cfg) + cfg.lambda2 * oracle_batch_cst(nodes, y)
}

#[allow(clippy::too_many_arguments)]
pub fn oracle_hst(
    z: &[Vec<f64>],
    p: &Pairs,
    nodes: &Nodes,
    y: &[LabelSet],
    protos: &[Vec<Vec<f64>>],
    theta_ist: &[f64],
    theta_cst: &[f64],
    cfg: &AlgorithmConfig,
) -> f64 {
    let score = oracle_ist_score(p, y);
    let ist_pseudo = sets_from(
        score
            .iter()
            .map(|r| r.iter().zip(theta_ist).map(|(s, t)| s >= t).collect()),
    );
    let sbar = oracle_prototype_score(nodes, protos);
    let cst_pseudo = sets_from(sbar.iter().map(|r| r.iter().zip(theta_cst).map(|(s, t)| s >= t).collect()));
    let mut cls = oracle_partial_bce_logits(z, y);
    cls += oracle_pseudo(z, &ist_pseudo).unwrap_or(0.0);
    cls += oracle_pseudo(z, &cst_pseudo).unwrap_or(0.0);
    let hits: Vec<f64> = y
        .iter()
        .enumerate()
        .flat_map(|(i, yi)| yi.iter().map(move |&j| (i, j)))
        .map(|(i, j)| sbar[i][j])
        .collect();
    let cst = 1.0 - mean(hits.into_iter());
    let d_ist: Vec<Vec<f64>> = score
        .iter()
        .map(|r| r.iter().zip(theta_ist).map(|(s, t)| sigmoid(s - t)).collect())
        .collect();
    let d_cst: Vec<Vec<f64>> = sbar
        .iter()
        .map(|r| r.iter().zip(theta_cst).map(|(s, t)| sigmoid(s - t)).collect())
        .collect();
    let dtl = oracle_partial_bce(&d_ist, y) + oracle_partial_bce(&d_cst, y);
    cls + cfg.lambda1 * oracle_ist_loss(p, y, cfg) + cfg.lambda2 * cst + cfg.lambda3 * dtl
}

/// `−mean_i Σ_j [y(1−p)^{γ⁺}log p + (1−y)p^{γ⁻}log(1−p)]` with soft or hard `y`.
pub fn oracle_mfm(p: &[Vec<f64>], y: &[Vec<f64>], gp: &[f64], gn: &[f64]) -> f64 {
    mean(p.iter().zip(y).map(|(pi, yi)| {
        -(0..pi.len())
            .map(|j| {
                let (pj, q) = (pi[j], (1.0 - pi[j]).max(1e-7));
                yi[j] * (1.0 - pj).powf(gp[j]) * pj.ln() + (1.0 - yi[j]) * pj.powf(gn[j]) * q.ln()
            })
            .sum::<f64>()
    }))
}

pub struct ComicFixture {
    pub z_h: Vec<Vec<f64>>,
    pub z_t: Vec<Vec<f64>>,
    pub z_b: Vec<Vec<f64>>,
    pub y: Vec<LabelSet>,
    pub running: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn comic_fixture() -> ComicFixture {
    ComicFixture {
        z_h: rows(&LOGITS),
        z_t: rows(&LOGITS_B),
        z_b: vec![
            vec![1.4, -0.5, 0.6],
            vec![2.0, 0.1, -1.0],
            vec![-0.9, 1.1, 1.6],
            vec![0.2, 0.95, -0.3],
        ],
        y: candidates(),
        running: vec![0.6, 0.3, 0.75],
        counts: vec![10, 4, 1],
    }
}

pub fn oracle_comic(fx: &ComicFixture, cfg: &AlgorithmConfig) -> f64 {
    let c = fx.running.len();
    let max = *fx.counts.iter().max().unwrap() as f64;
    let ht: Vec<f64> = fx.counts.iter().map(|&n| 1.0 + (max / n as f64).ln()).collect();
    let gp: Vec<f64> = ht.iter().map(|h| cfg.gamma_pn_pos + cfg.w_pos * h).collect();
    let gn: Vec<f64> = ht.iter().map(|h| cfg.gamma_pn_neg + cfg.w_neg * h).collect();
    let hard: Vec<Vec<f64>> = fx
        .y
        .iter()
        .map(|s| (0..c).map(|j| if s.contains(&j) { 1.0 } else { 0.0 }).collect())
        .collect();
    let sig = |z: &[Vec<f64>]| -> Vec<Vec<f64>> { z.iter().map(|r| r.iter().map(|&v| sigmoid(v)).collect()).collect() };
    let (ph, pt, pb) = (sig(&fx.z_h), sig(&fx.z_t), sig(&fx.z_b));
    let l_h = oracle_mfm(&ph, &hard, &gp, &gn);
    let l_t = oracle_mfm(&pt, &hard, &gp, &gn);
    let l_m = l_h + l_t + oracle_mfm(&pb, &hard, &gp, &gn);
    let kh = l_h.powf(cfg.alpha_d) / (l_h.powf(cfg.alpha_d) + l_t.powf(cfg.alpha_d));
    let kt = 1.0 - kh;
    let soft = |z: &[Vec<f64>]| -> Vec<Vec<f64>> { z.iter().map(|r| softmax(r)).collect() };
    let sb = soft(&fx.z_b);
    let l_b = kh * oracle_mfm(&sb, &soft(&fx.z_h), &gp, &gn) + kt * oracle_mfm(&sb, &soft(&fx.z_t), &gp, &gn);

    let mut n_t = 0.0;
    let mut sum = 0.0;
    for (i, yi) in fx.y.iter().enumerate() {
        for j in 0..c {
            let p = pb[i][j];
            let corrected = yi.contains(&j) && p > cfg.tau_c.max(fx.running[j]);
            let pos = (1.0 - p).powf(gp[j]) * p.ln();
            let neg = p.powf(gn[j]) * (1.0 - p).ln();
            let term = if corrected {
                n_t += 1.0;
                pos
            } else {
                let own = if yi.contains(&j) { pos } else { 0.0 };
                own + neg
            };
            sum += ht[j] * term;
        }
    }
    let b = fx.y.len() as f64;
    let l_c = if n_t == 0.0 { 0.0 } else { -(sum / b) * (b / n_t) };
    cfg.lambda_m * l_m + cfg.lambda_b * l_b + cfg.lambda_c * l_c
}

pub struct SemanticFixture {
    pub z: Vec<Vec<f64>>,
    pub pairs: Pairs,
    pub nodes: Nodes,
    pub y: Vec<LabelSet>,
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub theta_ist: Vec<f64>,
    pub theta_cst: Vec<f64>,
}

pub fn semantic_fixture() -> SemanticFixture {
    let pairs: Pairs = (0..4)
        .map(|i| {
            (0..3)
                .map(|j| (0..3).map(|k| 0.1 + 0.8 * (((i * 9 + j * 3 + k) as f64 * 0.73).sin() * 0.5 + 0.5)).collect())
                .collect()
        })
        .collect();
    let nodes: Nodes = (0..4)
        .map(|i| {
            (0..3)
                .map(|j| {
                    let a = (i * 3 + j) as f64;
                    vec![(a * 0.9).cos() + 0.3 * j as f64, (a * 1.3).sin() + 0.2]
                })
                .collect()
        })
        .collect();
    SemanticFixture {
        z: rows(&LOGITS),
        pairs,
        nodes,
        y: candidates(),
        prototypes: vec![
            vec![vec![1.0, 0.2], vec![-0.3, 0.8]],
            vec![vec![0.4, -0.9]],
            vec![vec![0.7, 0.7], vec![0.1, -0.5]],
        ],
        theta_ist: vec![0.55, 0.7, 0.85],
        theta_cst: vec![0.3, 0.5, 0.6],
    }
}

pub fn pairs_tensor(p: &Pairs) -> Tensor {
    let (b, c) = (p.len(), p[0].len());
    Tensor::new(vec![b, c, c], p.iter().flatten().flatten().copied().collect()).unwrap()
}

pub fn nodes_tensor(n: &Nodes) -> Tensor {
    let (b, c, d) = (n.len(), n[0].len(), n[0][0].len());
    Tensor::new(vec![b, c, d], n.iter().flatten().flatten().copied().collect()).unwrap()
}

/// Configuration used by the semantic fixtures: thresholds chosen so that
/// some pseudo labels fire and some do not.
pub fn semantic_cfg() -> AlgorithmConfig {
    AlgorithmConfig {
        theta_ist: 1.2,
        theta_cst: 0.2,
        ..AlgorithmConfig::default()
    }
}

pub fn sst_value(fx: &SemanticFixture, cfg: &AlgorithmConfig) -> (f64, usize, usize) {
    let mut t = Tape::new();
    let z = t.constant(tensor(&fx.z));
    let p = t.constant(pairs_tensor(&fx.pairs));
    let n = t.constant(nodes_tensor(&fx.nodes));
    let terms = semantic_objective(&mut t, z, p, n, &mask(&fx.y, 3), cfg, Consistency::Batch).unwrap();
    let fired = |v: &[Vec<bool>]| v.iter().flatten().filter(|&&b| b).count();
    (t.scalar(terms.loss), fired(&terms.ist_pseudo), fired(&terms.cst_pseudo))
}

pub fn hst_value(fx: &SemanticFixture, cfg: &AlgorithmConfig) -> (f64, usize, usize) {
    let mut t = Tape::new();
    let z = t.constant(tensor(&fx.z));
    let p = t.constant(pairs_tensor(&fx.pairs));
    let n = t.constant(nodes_tensor(&fx.nodes));
    let ti = t.constant(Tensor::vector(fx.theta_ist.clone()));
    let tc = t.constant(Tensor::vector(fx.theta_cst.clone()));
    let consistency = Consistency::Prototypes {
        prototypes: &fx.prototypes,
        theta_ist: ti,
        theta_cst: tc,
    };
    let terms = semantic_objective(&mut t, z, p, n, &mask(&fx.y, 3), cfg, consistency).unwrap();
    let fired = |v: &[Vec<bool>]| v.iter().flatten().filter(|&&b| b).count();
    (t.scalar(terms.loss), fired(&terms.ist_pseudo), fired(&terms.cst_pseudo))
}

pub fn comic_value(fx: &ComicFixture, cfg: &AlgorithmConfig) -> (f64, usize) {
    let mut t = Tape::new();
    let zh = t.constant(tensor(&fx.z_h));
    let zt = t.constant(tensor(&fx.z_t));
    let zb = t.constant(tensor(&fx.z_b));
    let focal = FocalFactors::new(head_tail_factors(&fx.counts), cfg);
    let terms = comic_objective(&mut t, zh, zt, zb, &mask(&fx.y, 3), &fx.running, &focal, cfg).unwrap();
    let corrected = terms.corrected.data().iter().filter(|&&v| v > 0.0).count();
    (t.scalar(terms.loss), corrected)
}

/// One entry per learner: `(name, implementation, oracle)`.
pub fn loss_suite() -> Vec<(&'static str, f64, f64)> {
    let z = rows(&LOGITS);
    let y = candidates();
    let m = mask(&y, 3);
    let mut out = Vec::new();

    out.push(("dnpl", eval(|t| {
        let zv = t.constant(tensor(&z));
        dnpl_loss(t, zv, &m)
    }), oracle_dnpl(&z, &y)));

    let f: Vec<Vec<f64>> = rows(&LOGITS_B).iter().map(|r| softmax(r)).collect();
    let w_impl: Vec<Vec<f64>> = f.iter().zip(&y).map(|(fi, yi)| renormalize_on_candidates(fi, yi)).collect();
    let w_oracle: Vec<Vec<f64>> = f.iter().zip(&y).map(|(fi, yi)| oracle_proden_weights(fi, yi)).collect();
    out.push(("proden", eval(|t| {
        let zv = t.constant(tensor(&z));
        soft_ce_loss(t, zv, &tensor(&w_impl))
    }), oracle_weighted_ce(&z, &w_oracle)));

    let sel_impl: Vec<Vec<f64>> = z.iter().zip(&y).map(|(zi, yi)| one_hot(3, cavl_select(zi, yi))).collect();
    let sel_oracle: Vec<Vec<f64>> = z
        .iter()
        .zip(&y)
        .map(|(zi, yi)| {
            let k = oracle_cavl_choice(zi, yi);
            (0..3).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    out.push(("cavl", eval(|t| {
        let zv = t.constant(tensor(&z));
        soft_ce_loss(t, zv, &tensor(&sel_impl))
    }), oracle_weighted_ce(&z, &sel_oracle)));

    let beta = 0.7;
    let lw_w: Vec<Vec<f64>> = z.iter().zip(&y).map(|(zi, yi)| lw_weights(zi, yi)).collect();
    out.push(("lw", eval(|t| {
        let zv = t.constant(tensor(&z));
        lw_loss(t, zv, &m, &tensor(&lw_w), beta)
    }), oracle_lw(&z, &y, beta)));

    let prev_w: Vec<Vec<f64>> = rows(&LOGITS_B).iter().map(|r| softmax(r)).collect();
    let prev_s: Vec<Vec<f64>> = rows(&LOGITS_C).iter().map(|r| softmax(r)).collect();
    let target_impl: Vec<Vec<f64>> = (0..4).map(|i| conformal_target(&[&prev_w[i], &prev_s[i]], &y[i])).collect();
    let target_oracle: Vec<Vec<f64>> = (0..4)
        .map(|i| oracle_conformal(&[prev_w[i].clone(), prev_s[i].clone()], &y[i]))
        .collect();
    let (zw, zs) = (rows(&LOGITS_B), rows(&LOGITS_C));
    let gamma = cr_gamma(3, 10, 1.0);
    out.push(("cr", eval(|t| {
        let zv = t.constant(tensor(&z));
        let a = t.constant(tensor(&zw));
        let b = t.constant(tensor(&zs));
        cr_loss(t, zv, &[a, b], &m, &tensor(&target_impl), gamma)
    }), oracle_cr(&z, &[zw.clone(), zs.clone()], &y, &target_oracle, 0.3)));

    out.push(("pico", pico_impl(), pico_oracle()));

    let cfg = semantic_cfg();
    let fx = semantic_fixture();
    out.push(("sst", sst_value(&fx, &cfg).0, oracle_sst(&fx.z, &fx.pairs, &fx.nodes, &fx.y, &cfg)));
    out.push((
        "hst",
        hst_value(&fx, &cfg).0,
        oracle_hst(&fx.z, &fx.pairs, &fx.nodes, &fx.y, &fx.prototypes, &fx.theta_ist, &fx.theta_cst, &cfg),
    ));

    let cfg = AlgorithmConfig::default();
    let cx = comic_fixture();
    out.push(("comic", comic_value(&cx, &cfg).0, oracle_comic(&cx, &cfg)));
    out
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub struct PicoFixture {
    pub q: Vec<Vec<f64>>,
    pub pool: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub soft: Vec<Vec<f64>>,
}

/// Queries, keys and a two-entry queue; labels are the argmax of [`LOGITS`].
pub fn pico_fixture() -> PicoFixture {
    let q: Vec<Vec<f64>> = [[0.9, 0.3], [-0.2, 1.0], [0.5, -0.7], [0.8, 0.8]].iter().map(|r| unit(r)).collect();
    let keys: Vec<Vec<f64>> = [[1.0, 0.1], [0.0, 1.0], [0.6, -0.6], [0.7, 0.9]].iter().map(|r| unit(r)).collect();
    let queue: Vec<Vec<f64>> = [[-0.5, 0.5], [0.3, 0.9]].iter().map(|r| unit(r)).collect();
    let preds: Vec<usize> = LOGITS
        .iter()
        .map(|r| (0..3).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
        .collect();
    let mut labels = preds.clone();
    labels.extend(&preds);
    labels.extend([2, 1]);
    let mut pool = q.clone();
    pool.extend(keys);
    pool.extend(queue);
    let soft = vec![
        vec![0.7, 0.0, 0.3],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 0.45, 0.55],
        vec![0.2, 0.3, 0.5],
    ];
    PicoFixture { q, pool, labels, soft }
}

pub const PICO_TAU: f64 = 0.07;
pub const PICO_LAMBDA: f64 = 0.5;

pub fn pico_positives(fx: &PicoFixture) -> Vec<Vec<usize>> {
    (0..fx.q.len())
        .map(|i| (0..fx.pool.len()).filter(|&a| a != i && fx.labels[a] == fx.labels[i]).collect())
        .collect()
}

pub fn pico_weights(fx: &PicoFixture) -> (Tensor, Tensor) {
    let (b, n) = (fx.q.len(), fx.pool.len());
    let mut w = vec![0.0; b * n];
    let mut bias = vec![0.0; b * n];
    for (i, pos) in pico_positives(fx).iter().enumerate() {
        bias[i * n + i] = -1e9;
        for &a in pos {
            w[i * n + a] = 1.0 / pos.len() as f64;
        }
    }
    (Tensor::new(vec![b, n], w).unwrap(), Tensor::new(vec![b, n], bias).unwrap())
}

fn pico_impl() -> f64 {
    let fx = pico_fixture();
    let (w, bias) = pico_weights(&fx);
    eval(|t| {
        let zv = t.constant(mat(&LOGITS.iter().map(|r| &r[..]).collect::<Vec<_>>()));
        let q = t.constant(tensor(&fx.q));
        let pool = t.constant(tensor(&fx.pool));
        let l_co = contrastive_loss(t, q, pool, &w, &bias, PICO_TAU)?;
        let l_cl = soft_ce_loss(t, zv, &tensor(&fx.soft))?;
        let l_co = t.scale(l_co, PICO_LAMBDA)?;
        Ok(t.add(l_cl, l_co)?)
    })
}

fn pico_oracle() -> f64 {
    let fx = pico_fixture();
    oracle_weighted_ce(&rows(&LOGITS), &fx.soft) + PICO_LAMBDA * oracle_contrastive(&fx.q, &fx.pool, &pico_positives(&fx), PICO_TAU)
}

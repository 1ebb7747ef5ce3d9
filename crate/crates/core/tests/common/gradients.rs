//! Finite-difference suite over every differentiable primitive, loss and
//! model fragment, each checked at freshly drawn random points.

use std::cell::RefCell;
use std::rc::Rc;

use pllforge_autodiff::{grad_check, BatchNormMode, GradCheckConfig, Result as AdResult, Tape, Tensor, Var};
use pllforge_core::data::LabelSet;
use pllforge_core::model::{
    AttentionFuse, Backbone, BackboneConfig, BackboneVariant, BatchNorm, Bind, Conv1d, GatedGraphPropagator,
    Linear, MultiHeadClassifier, ParamStore, PerClassClassifier, SemanticDecoupler,
};
use pllforge_core::pll::losses::{
    contrastive_loss, correction_loss, cr_loss, dnpl_loss, ist_loss, lw_loss, mfm_loss, nopll_loss, partial_bce,
    partial_bce_logits, soft_ce_loss,
};
use pllforge_core::pll::objectives::{
    comic_objective, distill, mfm_sigmoid, pair_mask, semantic_objective, Consistency, FocalFactors,
};
use pllforge_core::pll::AlgorithmConfig;
use pllforge_core::rng::keyed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracles::{mask, oracle_batch_cosine, oracle_ist_score, oracle_prototype_score, Nodes, Pairs};
use super::{set, sigmoid, to_ad};

pub const TOLERANCE: f64 = 1e-5;
/// Points whose discrete decisions sit this close to a threshold are redrawn.
const MARGIN: f64 = 1e-3;

type Draw = Box<dyn Fn(&mut ChaCha8Rng) -> Option<Vec<Tensor>>>;
type Loss = Rc<dyn Fn(&mut Tape, &[Var]) -> AdResult<Var>>;

pub struct Case {
    pub name: &'static str,
    draw: Draw,
    f: Loss,
    coords: Option<usize>,
}

pub struct CaseResult {
    pub name: &'static str,
    pub worst: f64,
    pub redrawn: usize,
}

fn case(name: &'static str, draw: Draw, f: Loss) -> Case {
    Case {
        name,
        draw,
        f,
        coords: None,
    }
}

pub fn run_case(c: &Case, points: usize, seed: u64) -> CaseResult {
    let mut rng = keyed(seed, c.name);
    let cfg = GradCheckConfig {
        h: 1e-5,
        floor: 1e-4,
        max_coords: c.coords,
    };
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for _ in 0..points {
        let params = loop {
            if let Some(p) = (c.draw)(&mut rng) {
                break p;
            }
            redrawn += 1;
            assert!(redrawn < 100 * points, "{}: no admissible point", c.name);
        };
        let f = c.f.clone();
        let err = grad_check(move |t, v| f(t, v), &params, cfg, &mut rng).unwrap();
        worst = worst.max(err);
    }
    CaseResult {
        name: c.name,
        worst,
        redrawn,
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Standard normal entries pushed at least `gap` away from each kink.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    randn(rng, shape).map(|x| {
        let mut x = x;
        for &k in kinks {
            if (x - k).abs() < gap {
                x = k + gap.copysign(x - k);
            }
        }
        x
    })
}

fn weighted_sum(t: &mut Tape, v: Var) -> AdResult<Var> {
    let n = t.value(v).len();
    let w = Tensor::new(t.shape(v).to_vec(), (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect())?;
    let w = t.constant(w);
    let p = t.mul(v, w)?;
    t.sum(p)
}

fn unary(name: &'static str, shape: &'static [usize], lo: f64, hi: f64, op: fn(&mut Tape, Var) -> AdResult<Var>) -> Case {
    case(
        name,
        Box::new(move |r| Some(vec![uniform(r, shape, lo, hi)])),
        Rc::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y)
        }),
    )
}

fn binary(name: &'static str, a: &'static [usize], b: &'static [usize], op: fn(&mut Tape, Var, Var) -> AdResult<Var>) -> Case {
    case(
        name,
        Box::new(move |r| Some(vec![randn(r, a), randn(r, b)])),
        Rc::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y)
        }),
    )
}

pub fn primitive_cases() -> Vec<Case> {
    let mut v = vec![
        binary("add", &[3, 4], &[4], |t, a, b| t.add(a, b)),
        binary("sub", &[3, 4], &[3, 4], |t, a, b| t.sub(a, b)),
        binary("mul", &[2, 3, 2], &[3, 2], |t, a, b| t.mul(a, b)),
        case(
            "div",
            Box::new(|r| Some(vec![randn(r, &[3, 4]), uniform(r, &[3, 4], 0.5, 2.0)])),
            Rc::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                weighted_sum(t, y)
            }),
        ),
        binary("matmul", &[3, 4], &[4, 2], |t, a, b| t.matmul(a, b)),
        unary("scale", &[3, 3], -2.0, 2.0, |t, a| t.scale(a, -1.7)),
        unary("neg", &[3, 3], -2.0, 2.0, |t, a| t.neg(a)),
        unary("add_scalar", &[3, 3], -2.0, 2.0, |t, a| t.add_scalar(a, 0.4)),
        unary("one_minus", &[3, 3], -2.0, 2.0, |t, a| t.one_minus(a)),
        unary("transpose", &[3, 4], -2.0, 2.0, |t, a| t.transpose(a)),
        unary("permute", &[2, 3, 4], -2.0, 2.0, |t, a| t.permute(a, &[2, 0, 1])),
        unary("reshape", &[2, 6], -2.0, 2.0, |t, a| t.reshape(a, &[3, 4])),
        unary("sigmoid", &[3, 4], -4.0, 4.0, |t, a| t.sigmoid(a)),
        unary("tanh", &[3, 4], -3.0, 3.0, |t, a| t.tanh(a)),
        unary("exp", &[3, 4], -2.0, 2.0, |t, a| t.exp(a)),
        unary("log", &[3, 4], 0.1, 3.0, |t, a| t.log(a)),
        unary("softplus", &[3, 4], -4.0, 4.0, |t, a| t.softplus(a)),
        unary("sqrt", &[3, 4], 0.2, 3.0, |t, a| t.sqrt(a)),
        unary("powf", &[3, 4], 0.2, 2.0, |t, a| t.powf(a, 2.5)),
        unary("softmax_rows", &[3, 4], -3.0, 3.0, |t, a| t.softmax(a, 1)),
        unary("softmax_cols", &[3, 4], -3.0, 3.0, |t, a| t.softmax(a, 0)),
        unary("log_softmax", &[3, 4], -3.0, 3.0, |t, a| t.log_softmax(a, 1)),
        unary("sum", &[3, 4], -2.0, 2.0, |t, a| {
            let s = t.sum(a)?;
            t.mul(s, s)
        }),
        unary("mean", &[3, 4], -2.0, 2.0, |t, a| {
            let s = t.mean(a)?;
            t.mul(s, s)
        }),
        unary("sum_axis", &[2, 3, 4], -2.0, 2.0, |t, a| t.sum_axis(a, 1)),
        unary("mean_axis", &[2, 3, 4], -2.0, 2.0, |t, a| t.mean_axis(a, 2)),
        unary("repeat", &[3, 1], -2.0, 2.0, |t, a| t.repeat(a, 1, 4)),
        unary("slice", &[3, 5], -2.0, 2.0, |t, a| t.slice(a, 1, 1, 4)),
        unary("index_select", &[4, 3], -2.0, 2.0, |t, a| t.index_select(a, 0, &[2, 0, 2])),
        unary("l2_normalize_rows", &[3, 4], -2.0, 2.0, |t, a| t.l2_normalize_rows(a, 1e-12)),
        unary("row_norms", &[3, 4], -2.0, 2.0, |t, a| t.row_norms(a, 1e-12)),
        binary("concat", &[3, 2], &[3, 4], |t, a, b| t.concat(&[a, b], 1)),
        case(
            "relu",
            Box::new(|r| Some(vec![away_from(r, &[3, 4], &[0.0], 1e-2)])),
            Rc::new(|t, v| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y)
            }),
        ),
        case(
            "clamp",
            Box::new(|r| Some(vec![away_from(r, &[3, 4], &[-0.5, 0.8], 1e-2)])),
            Rc::new(|t, v| {
                let y = t.clamp(v[0], -0.5, 0.8)?;
                weighted_sum(t, y)
            }),
        ),
        case(
            "linear",
            Box::new(|r| Some(vec![randn(r, &[3, 4]), randn(r, &[4, 2]), randn(r, &[2])])),
            Rc::new(|t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y)
            }),
        ),
        case(
            "conv1d",
            Box::new(|r| Some(vec![randn(r, &[2, 2, 7]), randn(r, &[3, 2, 3])])),
            Rc::new(|t, v| {
                let y = t.conv1d(v[0], v[1], 2, 1)?;
                weighted_sum(t, y)
            }),
        ),
        case(
            "batch_norm_train",
            Box::new(|r| Some(vec![randn(r, &[4, 3, 5]), uniform(r, &[3], 0.5, 1.5), randn(r, &[3])])),
            Rc::new(|t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
                let sq = t.mul(y, y)?;
                let y = t.add(y, sq)?;
                weighted_sum(t, y)
            }),
        ),
        case(
            "batch_norm_eval",
            Box::new(|r| Some(vec![randn(r, &[4, 3]), uniform(r, &[3], 0.5, 1.5), randn(r, &[3])])),
            Rc::new(|t, v| {
                let mode = BatchNormMode::Eval {
                    mean: &[0.1, -0.3, 0.2],
                    var: &[1.2, 0.6, 2.0],
                    eps: 1e-5,
                };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
                weighted_sum(t, y)
            }),
        ),
        case(
            "kl_div",
            Box::new(|r| {
                let a = randn(r, &[3, 4]);
                Some(vec![a, randn(r, &[3, 4])])
            }),
            Rc::new(|t, v| {
                let p = t.softmax(v[0], 1)?;
                let q = t.softmax(v[1], 1)?;
                let kl = t.kl_div(p, q)?;
                weighted_sum(t, kl)
            }),
        ),
    ];
    v.shrink_to_fit();
    v
}

fn cands() -> Vec<LabelSet> {
    vec![set(&[0, 2]), set(&[1]), set(&[1, 2]), set(&[0, 1, 2])]
}

fn ad<T>(r: pllforge_core::Result<T>) -> AdResult<T> {
    r.map_err(to_ad)
}

fn soft_rows(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Tensor {
    let raw = uniform(rng, &[b, c], 0.1, 1.0);
    let mut d = raw.data().to_vec();
    for r in 0..b {
        let s: f64 = d[r * c..(r + 1) * c].iter().sum();
        d[r * c..(r + 1) * c].iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![b, c], d).unwrap()
}

fn focal() -> FocalFactors {
    FocalFactors::new(vec![1.0, 1.4, 2.2], &AlgorithmConfig::default())
}

fn to_pairs(p: &Tensor) -> Pairs {
    let s = p.shape();
    (0..s[0])
        .map(|i| (0..s[1]).map(|j| (0..s[2]).map(|k| p.data()[(i * s[1] + j) * s[2] + k]).collect()).collect())
        .collect()
}

fn to_nodes(n: &Tensor) -> Nodes {
    to_pairs(n)
}

pub fn loss_cases() -> Vec<Case> {
    let y = cands();
    let m = mask(&y, 3);
    let mut out = Vec::new();

    let mm = m.clone();
    out.push(case(
        "nopll",
        Box::new(|r| Some(vec![randn(r, &[4, 3])])),
        Rc::new(move |t, v| ad(nopll_loss(t, v[0], &mm))),
    ));
    let mm = m.clone();
    out.push(case(
        "dnpl",
        Box::new(|r| Some(vec![randn(r, &[4, 3])])),
        Rc::new(move |t, v| ad(dnpl_loss(t, v[0], &mm))),
    ));
    let w = Rc::new(RefCell::new(Tensor::zeros(&[4, 3])));
    let w2 = w.clone();
    out.push(case(
        "soft_ce",
        Box::new(move |r| {
            *w.borrow_mut() = soft_rows(r, 4, 3);
            Some(vec![randn(r, &[4, 3])])
        }),
        Rc::new(move |t, v| ad(soft_ce_loss(t, v[0], &w2.borrow()))),
    ));
    let (mm, lw) = (m.clone(), Rc::new(RefCell::new(Tensor::zeros(&[4, 3]))));
    let lw2 = lw.clone();
    out.push(case(
        "lw",
        Box::new(move |r| {
            *lw.borrow_mut() = soft_rows(r, 4, 3);
            Some(vec![randn(r, &[4, 3])])
        }),
        Rc::new(move |t, v| ad(lw_loss(t, v[0], &mm, &lw2.borrow(), 0.7))),
    ));
    let (mm, target) = (m.clone(), Rc::new(RefCell::new(Tensor::zeros(&[4, 3]))));
    let target2 = target.clone();
    let yy = y.clone();
    out.push(case(
        "cr",
        Box::new(move |r| {
            let raw = soft_rows(r, 4, 3);
            let d: Vec<f64> = (0..12)
                .map(|i| if yy[i / 3].contains(&(i % 3)) { raw.data()[i] } else { 0.0 })
                .collect();
            let mut t = Tensor::new(vec![4, 3], d).unwrap();
            for row in 0..4 {
                let s: f64 = t.row(row).iter().sum();
                t.data_mut()[row * 3..row * 3 + 3].iter_mut().for_each(|v| *v /= s);
            }
            *target.borrow_mut() = t;
            Some(vec![randn(r, &[4, 3]), randn(r, &[4, 3]), randn(r, &[4, 3])])
        }),
        Rc::new(move |t, v| ad(cr_loss(t, v[0], &[v[1], v[2]], &mm, &target2.borrow(), 0.3))),
    ));
    out.push(case(
        "contrastive",
        Box::new(|r| Some(vec![randn(r, &[3, 2]), randn(r, &[5, 2])])),
        Rc::new(|t, v| {
            let mut w = vec![0.0; 15];
            let mut bias = vec![0.0; 15];
            for (i, pos) in [[1usize, 3], [0, 4], [1, 3]].iter().enumerate() {
                for &a in pos {
                    w[i * 5 + a] = 0.5;
                }
                bias[i * 5 + i] = -1e9;
            }
            let q = t.l2_normalize_rows(v[0], 1e-12)?;
            let pool = t.l2_normalize_rows(v[1], 1e-12)?;
            ad(contrastive_loss(
                t,
                q,
                pool,
                &Tensor::new(vec![3, 5], w)?,
                &Tensor::new(vec![3, 5], bias)?,
                0.5,
            ))
        }),
    ));
    let mm = m.clone();
    out.push(case(
        "partial_bce",
        Box::new(|r| Some(vec![uniform(r, &[4, 3], 0.05, 0.95)])),
        Rc::new(move |t, v| ad(partial_bce(t, v[0], &mm))),
    ));
    let mm = m.clone();
    out.push(case(
        "partial_bce_logits",
        Box::new(|r| Some(vec![randn(r, &[4, 3])])),
        Rc::new(move |t, v| ad(partial_bce_logits(t, v[0], &mm))),
    ));
    let pm = pair_mask(&y, 3);
    out.push(case(
        "ist_loss",
        Box::new(|r| {
            let p = uniform(r, &[4, 3, 3], 0.05, 0.95);
            (!p.data().iter().any(|v| (v - 0.05).abs() < MARGIN + 1e-5)).then_some(vec![p])
        }),
        Rc::new(move |t, v| ad(ist_loss(t, v[0], &pm, 2.0, 2.0, 0.05, -1.0))),
    ));
    let mm = m.clone();
    out.push(case(
        "mfm_loss",
        Box::new(|r| Some(vec![randn(r, &[4, 3])])),
        Rc::new(move |t, v| {
            let f = focal();
            let p = t.sigmoid(v[0])?;
            let lp = t.log(p)?;
            let q = t.one_minus(p)?;
            let lq = t.log(q)?;
            ad(mfm_loss(t, lp, lq, &mm, &f.gamma_pos, &f.gamma_neg))
        }),
    ));
    let mm = m.clone();
    out.push(case(
        "mfm_sigmoid",
        Box::new(|r| Some(vec![randn(r, &[4, 3])])),
        Rc::new(move |t, v| ad(mfm_sigmoid(t, v[0], &mm, &focal()))),
    ));
    let teacher = Rc::new(RefCell::new(Tensor::zeros(&[4, 3])));
    let teacher2 = teacher.clone();
    out.push(case(
        "distill",
        Box::new(move |r| {
            *teacher.borrow_mut() = randn(r, &[4, 3]);
            Some(vec![randn(r, &[4, 3])])
        }),
        Rc::new(move |t, v| ad(distill(t, v[0], &teacher2.borrow(), &focal()))),
    ));
    let (mm, flags) = (m.clone(), Rc::new(RefCell::new(Tensor::zeros(&[4, 3]))));
    let flags2 = flags.clone();
    let yy = y.clone();
    out.push(case(
        "correction_loss",
        Box::new(move |r| {
            let d: Vec<f64> = (0..12)
                .map(|i| if yy[i / 3].contains(&(i % 3)) && r.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            if d.iter().all(|&v| v == 0.0) {
                return None;
            }
            *flags.borrow_mut() = Tensor::new(vec![4, 3], d).unwrap();
            Some(vec![randn(r, &[4, 3])])
        }),
        Rc::new(move |t, v| {
            let f = focal();
            ad(correction_loss(t, v[0], &mm, &flags2.borrow(), &f.gamma_pos, &f.gamma_neg, &f.ht))
        }),
    ));
    out.extend(objective_cases());
    out
}

fn semantic_cfg() -> AlgorithmConfig {
    AlgorithmConfig {
        theta_ist: 1.2,
        theta_cst: 0.2,
        ..AlgorithmConfig::default()
    }
}

fn near(x: f64, theta: f64) -> bool {
    (x - theta).abs() < MARGIN
}

/// The whole semantic and three-expert objectives. Points whose pseudo-label
/// or correction decisions lie within `MARGIN` of a threshold are redrawn:
/// those decisions are piecewise constant and a finite difference straddling
/// one measures the jump, not the gradient.
fn objective_cases() -> Vec<Case> {
    let y = cands();
    let m = mask(&y, 3);
    let mut out = Vec::new();

    let (yy, mm) = (y.clone(), m.clone());
    out.push(case(
        "sst_objective",
        Box::new(move |r| {
            let cfg = semantic_cfg();
            let p = uniform(r, &[4, 3, 3], 0.1, 0.9);
            let n = randn(r, &[4, 3, 2]);
            let score = oracle_ist_score(&to_pairs(&p), &yy);
            let cosines = oracle_batch_cosine(&to_nodes(&n), &yy);
            let bad = score.iter().flatten().any(|&s| near(s, cfg.theta_ist))
                || cosines.iter().flatten().flatten().any(|&s| near(s, cfg.theta_cst));
            (!bad).then(|| vec![randn(r, &[4, 3]), p, n])
        }),
        Rc::new(move |t, v| {
            let terms = ad(semantic_objective(t, v[0], v[1], v[2], &mm, &semantic_cfg(), Consistency::Batch))?;
            Ok(terms.loss)
        }),
    ));

    let protos: Rc<RefCell<Vec<Vec<Vec<f64>>>>> = Rc::new(RefCell::new(Vec::new()));
    let protos2 = protos.clone();
    let (yy, mm) = (y.clone(), m.clone());
    out.push(case(
        "hst_objective",
        Box::new(move |r| {
            let ps: Vec<Vec<Vec<f64>>> = (0..3)
                .map(|j| (0..1 + j % 2).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect())
                .collect();
            let p = uniform(r, &[4, 3, 3], 0.1, 0.9);
            let n = randn(r, &[4, 3, 2]);
            let ti = uniform(r, &[3], 0.3, 1.5);
            let tc = uniform(r, &[3], -0.5, 0.5);
            let score = oracle_ist_score(&to_pairs(&p), &yy);
            let sbar = oracle_prototype_score(&to_nodes(&n), &ps);
            let bad = score.iter().any(|row| row.iter().zip(ti.data()).any(|(&s, &t)| near(s, t)))
                || sbar.iter().any(|row| row.iter().zip(tc.data()).any(|(&s, &t)| near(s, t)));
            *protos.borrow_mut() = ps;
            (!bad).then(|| vec![randn(r, &[4, 3]), p, n, ti, tc])
        }),
        Rc::new(move |t, v| {
            let ps = protos2.borrow();
            let consistency = Consistency::Prototypes {
                prototypes: &ps,
                theta_ist: v[3],
                theta_cst: v[4],
            };
            let terms = ad(semantic_objective(t, v[0], v[1], v[2], &mm, &AlgorithmConfig::default(), consistency))?;
            Ok(terms.loss)
        }),
    ));

    // The balance weights and distillation teachers are taken as constants
    // by the objective, so it is differentiated with respect to the balanced
    // logits only; the head and tail terms are covered by `mfm_sigmoid`.
    let experts = Rc::new(RefCell::new((Tensor::zeros(&[4, 3]), Tensor::zeros(&[4, 3]))));
    let experts2 = experts.clone();
    let running = [0.6, 0.3, 0.75];
    let (yy, mm) = (y.clone(), m.clone());
    out.push(case(
        "comic_objective",
        Box::new(move |r| {
            let cfg = AlgorithmConfig::default();
            let zb = randn(r, &[4, 3]);
            let bad = (0..12).any(|i| {
                yy[i / 3].contains(&(i % 3)) && near(sigmoid(zb.data()[i]), cfg.tau_c.max(running[i % 3]))
            });
            *experts.borrow_mut() = (randn(r, &[4, 3]), randn(r, &[4, 3]));
            (!bad).then_some(vec![zb])
        }),
        Rc::new(move |t, v| {
            let (zh, zt) = experts2.borrow().clone();
            let zh = t.constant(zh);
            let zt = t.constant(zt);
            let cfg = AlgorithmConfig::default();
            let f = FocalFactors::new(vec![1.0, 1.9, 2.6], &cfg);
            let terms = ad(comic_objective(t, zh, zt, v[0], &mm, &running, &f, &cfg))?;
            Ok(terms.loss)
        }),
    ));
    out
}

/// A model case: every store parameter plus the listed inputs is a checked
/// tensor; both are redrawn at each point.
fn model_case(
    name: &'static str,
    store: ParamStore,
    inputs: Vec<Vec<usize>>,
    coords: usize,
    f: impl Fn(&mut Tape, &mut Bind, &[Var]) -> pllforge_core::Result<Var> + 'static,
) -> Case {
    let store = Rc::new(store);
    let n_params = store.params().len();
    let s2 = store.clone();
    let draw: Draw = Box::new(move |r| {
        let mut v: Vec<Tensor> = s2
            .params()
            .iter()
            .map(|p| randn(r, p.value.shape()).map(|x| 0.6 * x))
            .collect();
        v.extend(inputs.iter().map(|s| randn(r, s)));
        Some(v)
    });
    let loss: Loss = Rc::new(move |t, v| {
        let mut bind = Bind::new(&store, &v[..n_params], true);
        let out = ad(f(t, &mut bind, &v[n_params..]))?;
        weighted_sum(t, out)
    });
    Case {
        name,
        draw,
        f: loss,
        coords: Some(coords),
    }
}

fn backbone_case(name: &'static str, variant: BackboneVariant) -> Case {
    let cfg = BackboneConfig {
        variant,
        leads: 2,
        length: 8,
        embed_dim: 4,
        num_classes: 3,
    };
    let mut store = ParamStore::new();
    let mut rng = keyed(0, name);
    let net = Backbone::new(&mut store, "net", &cfg, true, 0, &mut rng).unwrap();
    model_case(name, store, vec![vec![3, 2, 8]], 4, move |t, bind, x| {
        let out = net.forward(t, bind, x[0])?;
        let z = out.logits.expect("head requested");
        let sq = t.mul(out.embedding, out.embedding)?;
        let e = t.sum(sq)?;
        let e = t.scale(e, 0.1)?;
        let z = t.sum(z)?;
        Ok(t.add(z, e)?)
    })
}

pub fn model_cases() -> Vec<Case> {
    let mut out = vec![
        backbone_case("linear_backbone", BackboneVariant::Linear),
        backbone_case("mlp_backbone", BackboneVariant::Mlp { hidden: vec![5, 4] }),
        backbone_case(
            "resnet_backbone",
            BackboneVariant::SmallResnet1d {
                blocks: 2,
                channels: 4,
            },
        ),
    ];
    let mut rng = keyed(0, "model cases");

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, 0, &mut rng);
    out.push(model_case("linear_layer", store, vec![vec![3, 4]], 8, move |t, b, x| lin.forward(t, b, x[0])));

    let mut store = ParamStore::new();
    let conv = Conv1d::new(&mut store, "conv", 2, 3, 3, 2, 1, 0, &mut rng);
    out.push(model_case("conv_layer", store, vec![vec![2, 2, 9]], 8, move |t, b, x| conv.forward(t, b, x[0])));

    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3, 0);
    out.push(model_case("batch_norm_layer", store, vec![vec![4, 3, 5]], 8, move |t, b, x| {
        let y = bn.forward(t, b, x[0])?;
        let sq = t.mul(y, y)?;
        Ok(t.add(y, sq)?)
    }));

    let mut store = ParamStore::new();
    let dec = SemanticDecoupler::new(&mut store, "dec", 4, 3, 5, 2, 0, &mut rng);
    out.push(model_case("decoupler", store, vec![vec![3, 4], vec![3, 3]], 8, move |t, b, x| {
        dec.forward(t, b, x[0], x[1])
    }));

    let mut store = ParamStore::new();
    let ggnn = GatedGraphPropagator::new(&mut store, "ggnn", 3, 2, 0, &mut rng);
    out.push(model_case("graph_propagator", store, vec![vec![2, 3, 3], vec![3, 3]], 6, move |t, b, x| {
        let adj = t.sigmoid(x[1])?;
        ggnn.forward(t, b, x[0], adj)
    }));

    let mut store = ParamStore::new();
    let pcc = PerClassClassifier::new(&mut store, "cls", 3, 4, 0, &mut rng);
    out.push(model_case("per_class_classifier", store, vec![vec![2, 3, 4]], 8, move |t, b, x| {
        pcc.forward(t, b, x[0])
    }));

    let mut store = ParamStore::new();
    let attn = AttentionFuse::new(&mut store, "attn", 4, 3, 0, &mut rng);
    out.push(model_case(
        "attention_fuse",
        store,
        vec![vec![3, 4], vec![3, 4], vec![3, 4]],
        8,
        move |t, b, x| {
            let (fused, alpha) = attn.forward(t, b, x[0], &[x[1], x[2]])?;
            let a = t.sum(alpha)?;
            let s = t.sum(fused)?;
            let sq = t.mul(fused, fused)?;
            let sq = t.sum(sq)?;
            let s = t.add(s, sq)?;
            Ok(t.add(s, a)?)
        },
    ));

    let mut store = ParamStore::new();
    let mhc = MultiHeadClassifier::new(&mut store, "mhc", 3, 4, 2, 4.0, 0.1, 0, &mut rng).unwrap();
    let mhc2 = mhc.clone();
    out.push(model_case("multi_head_classifier", store.clone(), vec![vec![3, 4]], 8, move |t, b, x| {
        mhc.forward(t, b, x[0])
    }));
    out.push(model_case("bias_adjust", store, vec![vec![3, 4]], 8, move |t, b, x| {
        let z = mhc2.forward(t, b, x[0])?;
        let up = mhc2.bias_adjust(t, b, z, x[0], &[0.3, -0.7, 0.5, 0.0], 1.0)?;
        let down = mhc2.bias_adjust(t, b, z, x[0], &[0.2, 0.4, -0.9, 0.6], -1.0)?;
        let down = t.scale(down, 0.5)?;
        Ok(t.add(up, down)?)
    }));
    out
}

pub fn all_cases() -> Vec<Case> {
    let mut v = primitive_cases();
    v.extend(loss_cases());
    v.extend(model_cases());
    v
}

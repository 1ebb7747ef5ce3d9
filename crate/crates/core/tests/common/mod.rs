#![allow(dead_code)]

pub mod gradients;
pub mod oracles;

use std::sync::Arc;

use pllforge_autodiff::{AutodiffError, Tape, Tensor, Var};
use pllforge_core::data::{LabelSet, LabelSpace, PartialDataset, SignalRecord, Split};

pub fn set(v: &[usize]) -> LabelSet {
    v.iter().copied().collect()
}

pub fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn to_ad(e: pllforge_core::CoreError) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op: "test closure",
        reason: e.to_string(),
    }
}

/// Records `f` on a fresh tape and returns the scalar it produces.
pub fn eval(f: impl FnOnce(&mut Tape) -> pllforge_core::Result<Var>) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t).unwrap();
    t.scalar(v)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A dataset with `C` classes whose superclasses are `sup`, one record per
/// ground-truth set, all in the train split, with constant zero signals.
pub fn toy_dataset(sup: &[&str], truths: &[LabelSet]) -> PartialDataset {
    let c = sup.len();
    let names: Vec<String> = (0..c).map(|k| format!("k{k}")).collect();
    let space = LabelSpace::new(names, Some(sup.iter().map(|s| s.to_string()).collect())).unwrap();
    let records = truths
        .iter()
        .enumerate()
        .map(|(i, g)| SignalRecord {
            instance_id: format!("i{i}"),
            signal: Arc::from(vec![0.0; 4]),
            ground_truth: g.clone(),
            candidate: g.clone(),
            ambiguous: false,
            split: Split::Train,
        })
        .collect();
    PartialDataset {
        label_space: space,
        leads: 1,
        length: 4,
        records,
        provenance: None,
    }
}

/// Small synthetic dataset with random candidate sets on the train split.
pub fn toy_partial(classes: usize, instances: usize, p: f64, seed: u64) -> PartialDataset {
    use pllforge_core::ambiguity::{generate_candidates, GenerationConfig};
    use pllforge_core::synth::{synthesize, SynthConfig};
    let s = synthesize(&SynthConfig {
        classes,
        instances,
        length: 16,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    generate_candidates(&s.dataset, &GenerationConfig::random(p, 0.5, seed), None).unwrap()
}

/// Trains `learner` with the same batching and optimiser as the harness,
/// calling `check` after every epoch boundary.
pub fn run_epochs(
    learner: &mut dyn pllforge_core::pll::Learner,
    data: &pllforge_core::pll::TrainSet,
    opt: &pllforge_core::harness::OptimizerConfig,
    seed: u64,
    mut check: impl FnMut(usize, &dyn pllforge_core::pll::Learner),
) {
    use pllforge_core::harness::RmsProp;
    use pllforge_core::pll::Batch;
    learner.begin(data, opt.epochs).unwrap();
    let mut optim = RmsProp::new(opt, learner.store());
    let decays = learner.group_decays();
    let order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opt.epochs {
        for (number, chunk) in order.chunks(opt.batch_size).enumerate() {
            let batch = Batch {
                indices: chunk.to_vec(),
                x: data.inputs(chunk),
                mask: data.mask(chunk),
                epoch,
                epochs: opt.epochs,
                number,
                seed,
            };
            let mut tape = Tape::new();
            let vars = learner.store().bind_all(&mut tape);
            let step = learner.loss(&mut tape, &vars, &batch).unwrap();
            assert!(tape.scalar(step.loss).is_finite());
            let grads = tape.backward(step.loss).unwrap();
            learner.after_backward(&grads, &batch).unwrap();
            optim.step(learner.store_mut(), &vars, &grads, epoch, &decays);
            learner.store_mut().apply_bn_updates(&step.bn);
            learner.after_step().unwrap();
        }
        learner.end_epoch(epoch, data).unwrap();
        check(epoch, learner);
    }
}

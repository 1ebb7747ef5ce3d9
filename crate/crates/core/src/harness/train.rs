use std::path::Path;

use pllforge_autodiff::Tape;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::BackboneSpec;
use super::metrics::{macro_auroc, micro_f1, per_class_f1, threshold};
use super::optim::{OptimizerConfig, RmsProp};
use crate::data::{LabelSet, PartialDataset};
use crate::error::{CoreError, Result};
use crate::io::write_bytes;
use crate::model::{load_checkpoint, save_checkpoint, BackboneConfig};
use crate::pll::{build_learner, stack_signals, Algorithm, AlgorithmConfig, Batch, Learner, TrainSet};
use crate::rng::keyed;

/// Score threshold for predicted labels.
pub const DECISION_THRESHOLD: f64 = 0.5;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_micro_f1: f64,
}

pub struct TrainedModel {
    pub learner: Box<dyn Learner>,
    pub history: Vec<EpochRecord>,
    pub meta: ModelMeta,
}

/// Everything needed to rebuild a learner around saved parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub algorithm: Algorithm,
    pub hyper: AlgorithmConfig,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub micro_f1: f64,
    pub macro_auroc: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub scores: Vec<Vec<f64>>,
}

/// Trains one learner on the dataset's train split.
pub fn train(
    ds: &PartialDataset,
    algorithm: Algorithm,
    hyper: &AlgorithmConfig,
    backbone: &BackboneSpec,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainedModel> {
    opt.validate()?;
    let data = TrainSet::from_dataset(ds);
    if data.is_empty() {
        return Err(CoreError::Invalid("train split is empty".into()));
    }
    let bb = backbone.resolve(ds);
    let mut learner = build_learner(algorithm, hyper, &bb, seed)?;
    learner.begin(&data, opt.epochs)?;
    let mut optim = RmsProp::new(opt, learner.store());
    let decays = learner.group_decays();
    let train_idx = ds.train_indices();
    let mut history = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut keyed(seed, &format!("shuffle/{epoch}")));
        let mut total = 0.0;
        let mut batches = 0;
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
            let step = learner.loss(&mut tape, &vars, &batch)?;
            let value = tape.scalar(step.loss);
            if !value.is_finite() {
                return Err(CoreError::NonFiniteLoss { epoch, batch: number });
            }
            let grads = tape.backward(step.loss)?;
            learner.after_backward(&grads, &batch)?;
            optim.step(learner.store_mut(), &vars, &grads, epoch, &decays);
            learner.store_mut().apply_bn_updates(&step.bn);
            learner.after_step()?;
            total += value;
            batches += 1;
        }
        learner.end_epoch(epoch, &data)?;
        let scores = predict_scores(learner.as_ref(), ds, &train_idx)?;
        let pred: Vec<LabelSet> = scores.iter().map(|s| threshold(s, DECISION_THRESHOLD)).collect();
        let truth: Vec<LabelSet> = train_idx.iter().map(|&i| ds.records[i].ground_truth.clone()).collect();
        history.push(EpochRecord {
            epoch,
            loss: total / batches as f64,
            train_micro_f1: micro_f1(&pred, &truth),
        });
        log::debug!("{algorithm} seed {seed} epoch {epoch}: loss {:.5}", total / batches as f64);
    }
    Ok(TrainedModel {
        learner,
        history,
        meta: ModelMeta {
            algorithm,
            hyper: hyper.clone(),
            backbone: bb,
            seed,
        },
    })
}

/// Per-class scores in `[0, 1]` for the given records.
pub fn predict_scores(learner: &dyn Learner, ds: &PartialDataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    let scoring = learner.algorithm().scoring();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = stack_signals(chunk.iter().map(|&i| &ds.records[i].signal[..]), chunk.len(), ds.leads, ds.length);
        let z = learner.logits(&x)?;
        for r in 0..chunk.len() {
            out.push(scoring.apply(z.row(r)));
        }
    }
    Ok(out)
}

/// Metrics against ground truth on the given records.
pub fn evaluate(learner: &dyn Learner, ds: &PartialDataset, idx: &[usize]) -> Result<Evaluation> {
    let scores = predict_scores(learner, ds, idx)?;
    let pred: Vec<LabelSet> = scores.iter().map(|s| threshold(s, DECISION_THRESHOLD)).collect();
    let truth: Vec<LabelSet> = idx.iter().map(|&i| ds.records[i].ground_truth.clone()).collect();
    let c = ds.num_classes();
    Ok(Evaluation {
        micro_f1: micro_f1(&pred, &truth),
        macro_auroc: macro_auroc(&scores, &truth, c)?,
        per_class_f1: per_class_f1(&pred, &truth, c),
        scores,
    })
}

pub fn evaluate_test(learner: &dyn Learner, ds: &PartialDataset) -> Result<Evaluation> {
    evaluate(learner, ds, &ds.test_indices())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerClassRow {
    pub class: String,
    pub train_count: usize,
    pub f1: Option<f64>,
}

/// Per-class F1 ordered by descending train-split frequency, ties by index.
pub fn per_class_report(ds: &PartialDataset, f1: &[Option<f64>]) -> Vec<PerClassRow> {
    let counts = ds.train_label_counts();
    let mut order: Vec<usize> = (0..ds.num_classes()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(counts[k]), k));
    order
        .into_iter()
        .map(|k| PerClassRow {
            class: ds.label_space.class_names()[k].clone(),
            train_count: counts[k],
            f1: f1[k],
        })
        .collect()
}

pub fn save_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    let meta = serde_json::to_value(&model.meta).expect("meta serializes");
    save_checkpoint(dir, meta, model.learner.store())
}

pub fn load_model(dir: &Path) -> Result<(ModelMeta, Box<dyn Learner>)> {
    let (meta, store) = load_checkpoint(dir)?;
    let meta: ModelMeta = serde_json::from_value(meta)
        .map_err(|e| CoreError::format(dir.join(crate::model::CHECKPOINT_MANIFEST), e))?;
    let mut learner = build_learner(meta.algorithm, &meta.hyper, &meta.backbone, meta.seed)?;
    learner.store_mut().load_values(&store)?;
    Ok((meta, learner))
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h).expect("record serializes"));
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

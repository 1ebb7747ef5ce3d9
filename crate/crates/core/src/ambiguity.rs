//! Candidate-set generation and flip-probability analysis.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, LabelSet, LabelSpace, PartialDataset, Provenance, SignalRecord, Split};
use crate::error::{invalid, CoreError, Result};
use crate::io::read_matrix_raw;
use crate::rng::keyed;
use crate::similarity::{
    cosine_similarity, minmax_normalize, minmax_normalize_offdiag, ClassPrototypeSet, MatrixKind,
    TransitionMatrix,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Treatment,
    Taxonomy,
    ClassCardiologist,
    InstanceCardiologist,
    ModelDriven,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::Treatment,
        Strategy::Taxonomy,
        Strategy::ClassCardiologist,
        Strategy::InstanceCardiologist,
        Strategy::ModelDriven,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Treatment => "treatment",
            Strategy::Taxonomy => "taxonomy",
            Strategy::ClassCardiologist => "class-cardiologist",
            Strategy::InstanceCardiologist => "instance-cardiologist",
            Strategy::ModelDriven => "model-driven",
        }
    }

    /// The matrix kind the strategy samples from, `None` for random.
    pub fn matrix_kind(self) -> Option<MatrixKind> {
        match self {
            Strategy::Random => None,
            Strategy::Treatment | Strategy::Taxonomy | Strategy::ClassCardiologist => {
                Some(MatrixKind::Class)
            }
            Strategy::InstanceCardiologist | Strategy::ModelDriven => Some(MatrixKind::Instance),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| CoreError::Invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub p: f64,
    pub epsilon: f64,
    pub r: Option<usize>,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn random(p: f64, epsilon: f64, seed: u64) -> Self {
        Self {
            strategy: Strategy::Random,
            p,
            epsilon,
            r: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return invalid(format!("p = {} outside [0, 1]", self.p));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return invalid(format!("epsilon = {} outside [0, 1]", self.epsilon));
        }
        if self.r == Some(0) {
            return invalid("r must be positive when set");
        }
        Ok(())
    }
}

pub fn epsilon_random(cfg: &GenerationConfig, c: usize) -> Vec<f64> {
    vec![cfg.epsilon; c]
}

/// Mean of the transition rows of the true labels.
pub fn epsilon_class_level(t: &TransitionMatrix, truth: &LabelSet) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for &k in truth {
        for (o, v) in out.iter_mut().zip(&t.values[k]) {
            *o += v;
        }
    }
    let n = truth.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Draws the candidate set of one record. Uniforms are consumed in a fixed
/// order (flag, then one per class) so runs at different `p` or `ε` share
/// draws.
fn sample_record(
    rec: &SignalRecord,
    cfg: &GenerationConfig,
    eps: &[f64],
) -> (LabelSet, bool) {
    let mut rng = keyed(cfg.seed, &rec.instance_id);
    let flag_u: f64 = rng.random();
    let us: Vec<f64> = (0..eps.len()).map(|_| rng.random()).collect();
    if flag_u >= cfg.p {
        return (rec.ground_truth.clone(), false);
    }
    let mut added: Vec<usize> = (0..eps.len())
        .filter(|j| !rec.ground_truth.contains(j) && us[*j] < eps[*j])
        .collect();
    if let Some(r) = cfg.r {
        if added.len() > r {
            let keep = sample(&mut rng, added.len(), r);
            let mut kept: Vec<usize> = keep.into_iter().map(|i| added[i]).collect();
            kept.sort_unstable();
            added = kept;
        }
    }
    let mut cand = rec.ground_truth.clone();
    cand.extend(added);
    (cand, true)
}

/// Builds partial-label candidates for every train record; test records are
/// copied untouched.
pub fn generate_candidates(
    ds: &PartialDataset,
    cfg: &GenerationConfig,
    t: Option<&TransitionMatrix>,
) -> Result<PartialDataset> {
    cfg.validate()?;
    let c = ds.num_classes();
    let matrix = match (cfg.strategy.matrix_kind(), t) {
        (None, _) => None,
        (Some(_), None) => return Err(CoreError::MissingMatrix(cfg.strategy.as_str())),
        (Some(kind), Some(t)) => {
            if t.kind != kind {
                return invalid(format!(
                    "strategy {} needs a {kind:?}-level matrix, got {:?}",
                    cfg.strategy, t.kind
                ));
            }
            if t.cols() != c {
                return invalid(format!("matrix has {} columns, label space has {c}", t.cols()));
            }
            if kind == MatrixKind::Instance && t.rows() != ds.records.len() {
                return invalid(format!(
                    "instance-level matrix has {} rows, dataset has {} records",
                    t.rows(),
                    ds.records.len()
                ));
            }
            Some(t)
        }
    };

    let records: Vec<SignalRecord> = ds
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut out = rec.clone();
            if rec.split == Split::Test {
                out.candidate = rec.ground_truth.clone();
                out.ambiguous = false;
                return out;
            }
            let eps = match matrix {
                None => epsilon_random(cfg, c),
                Some(t) if t.kind == MatrixKind::Class => epsilon_class_level(t, &rec.ground_truth),
                Some(t) => t.values[i].clone(),
            };
            let (cand, flag) = sample_record(rec, cfg, &eps);
            out.candidate = cand;
            out.ambiguous = flag;
            out
        })
        .collect();

    Ok(PartialDataset {
        label_space: ds.label_space.clone(),
        leads: ds.leads,
        length: ds.length,
        records,
        provenance: Some(Provenance {
            strategy: cfg.strategy.as_str().into(),
            p: cfg.p,
            epsilon: cfg.epsilon,
            r: cfg.r,
            seed: cfg.seed,
            matrix_sha256: matrix.map(TransitionMatrix::checksum),
        }),
    })
}

/// Loads a square class-level matrix named by class header, reorders it into
/// label-space order and clamps entries to `[0, 1]`. Clamped entries are
/// returned as warnings.
pub fn build_treatment_matrix(
    path: &Path,
    space: &LabelSpace,
) -> Result<(TransitionMatrix, Vec<String>)> {
    let (header, rows) = read_matrix_raw(path)?;
    treatment_from_rows(&header, &rows, space)
}

pub fn treatment_from_rows(
    header: &[String],
    rows: &[Vec<f64>],
    space: &LabelSpace,
) -> Result<(TransitionMatrix, Vec<String>)> {
    let c = space.num_classes();
    if rows.len() != header.len() {
        return invalid(format!(
            "treatment matrix is not square: {} rows, {} columns",
            rows.len(),
            header.len()
        ));
    }
    if header.len() != c {
        return invalid(format!("treatment matrix covers {} classes, label space has {c}", header.len()));
    }
    let mut order = Vec::with_capacity(c);
    for name in header {
        order.push(space.index_of(name).ok_or_else(|| CoreError::UnknownClass(name.clone()))?);
    }
    if order.iter().collect::<BTreeSet<_>>().len() != c {
        return invalid("treatment matrix repeats a class");
    }
    let mut warnings = Vec::new();
    let mut values = vec![vec![0.0; c]; c];
    for (a, row) in order.iter().zip(rows) {
        for (b, &v) in order.iter().zip(row) {
            let clamped = v.clamp(0.0, 1.0);
            if clamped != v {
                let msg = format!(
                    "treatment weight {v} for ({}, {}) clamped to {clamped}",
                    space.class_names()[*a],
                    space.class_names()[*b]
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            values[*a][*b] = clamped;
        }
    }
    let names = space.class_names().to_vec();
    Ok((TransitionMatrix::new(MatrixKind::Class, names.clone(), names, values)?, warnings))
}

pub fn build_taxonomy_matrix(space: &LabelSpace, epsilon: f64) -> Result<TransitionMatrix> {
    let sup = space
        .superclasses()
        .ok_or_else(|| CoreError::Invalid("taxonomy strategy needs a superclass map".into()))?;
    let c = space.num_classes();
    let values = (0..c)
        .map(|j| {
            (0..c)
                .map(|k| if j != k && sup[j] == sup[k] { epsilon } else { 0.0 })
                .collect()
        })
        .collect();
    let names = space.class_names().to_vec();
    TransitionMatrix::new(MatrixKind::Class, names.clone(), names, values)
}

fn defined_prototypes<'a>(protos: &'a ClassPrototypeSet, space: &LabelSpace) -> Result<Vec<&'a [f64]>> {
    (0..space.num_classes())
        .map(|k| {
            protos
                .get(k)
                .ok_or_else(|| CoreError::UndefinedPrototype(space.class_names()[k].clone()))
        })
        .collect()
}

/// Cosine similarity between prototypes before normalisation.
pub fn prototype_similarity(protos: &ClassPrototypeSet, space: &LabelSpace) -> Result<TransitionMatrix> {
    let v = defined_prototypes(protos, space)?;
    let mut values = Vec::with_capacity(v.len());
    for a in &v {
        values.push(v.iter().map(|b| cosine_similarity(a, b)).collect::<Result<Vec<_>>>()?);
    }
    let names = space.class_names().to_vec();
    TransitionMatrix::new(MatrixKind::Class, names.clone(), names, values)
}

pub fn build_class_cardiologist_matrix(
    protos: &ClassPrototypeSet,
    space: &LabelSpace,
) -> Result<TransitionMatrix> {
    minmax_normalize_offdiag(&prototype_similarity(protos, space)?)
}

/// Instance-to-prototype cosine similarities, normalised over the whole matrix.
/// Rows follow the dataset's record order.
pub fn build_instance_cardiologist_matrix(
    features: &FeatureTable,
    protos: &ClassPrototypeSet,
    ds: &PartialDataset,
) -> Result<TransitionMatrix> {
    let v = defined_prototypes(protos, &ds.label_space)?;
    let mut values = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        let x = features
            .get(&r.instance_id)
            .ok_or_else(|| CoreError::Invalid(format!("{}: no feature row", r.instance_id)))?;
        let row = v
            .iter()
            .map(|p| {
                cosine_similarity(x, p).map_err(|_| {
                    CoreError::UndefinedSimilarity(format!("{}: zero feature vector", r.instance_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    let raw = TransitionMatrix::new(
        MatrixKind::Instance,
        ds.records.iter().map(|r| r.instance_id.clone()).collect(),
        ds.label_space.class_names().to_vec(),
        values,
    )?;
    minmax_normalize(&raw)
}

/// Confidence of each incorrect class divided by the largest incorrect
/// confidence; true classes get 0, and rows with no incorrect confidence are 0.
pub fn build_model_driven_matrix(
    predictions: &[Vec<f64>],
    ds: &PartialDataset,
) -> Result<TransitionMatrix> {
    let c = ds.num_classes();
    if predictions.len() != ds.records.len() {
        return invalid(format!(
            "{} prediction rows for {} records",
            predictions.len(),
            ds.records.len()
        ));
    }
    let mut values = Vec::with_capacity(predictions.len());
    for (r, pred) in ds.records.iter().zip(predictions) {
        if pred.len() != c {
            return invalid(format!("{}: prediction has {} entries, expected {c}", r.instance_id, pred.len()));
        }
        if pred.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid(format!("{}: prediction outside [0, 1]", r.instance_id));
        }
        let max = (0..c)
            .filter(|k| !r.ground_truth.contains(k))
            .map(|k| pred[k])
            .fold(0.0, f64::max);
        let row = (0..c)
            .map(|k| {
                if r.ground_truth.contains(&k) || max == 0.0 {
                    0.0
                } else {
                    pred[k] / max
                }
            })
            .collect();
        values.push(row);
    }
    TransitionMatrix::new(
        MatrixKind::Instance,
        ds.records.iter().map(|r| r.instance_id.clone()).collect(),
        ds.label_space.class_names().to_vec(),
        values,
    )
}

/// Mean over train records of `|Y ∖ Ỹ| / (C − |Ỹ|)`; records whose ground
/// truth already covers every class are skipped.
pub fn flip_probability(ds: &PartialDataset) -> f64 {
    let c = ds.num_classes();
    let ratios: Vec<f64> = ds
        .records
        .iter()
        .filter(|r| r.split == Split::Train && r.ground_truth.len() < c)
        .map(|r| {
            let false_pos = r.candidate.difference(&r.ground_truth).count();
            false_pos as f64 / (c - r.ground_truth.len()) as f64
        })
        .collect();
    if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

/// Per-class rate at which a negative class was added as a false candidate,
/// over train records where the class is negative.
pub fn class_flip_rates(ds: &PartialDataset) -> Vec<Option<f64>> {
    let c = ds.num_classes();
    let mut neg = vec![0usize; c];
    let mut hit = vec![0usize; c];
    for r in ds.records.iter().filter(|r| r.split == Split::Train) {
        for k in (0..c).filter(|k| !r.ground_truth.contains(k)) {
            neg[k] += 1;
            if r.candidate.contains(&k) {
                hit[k] += 1;
            }
        }
    }
    neg.iter()
        .zip(&hit)
        .map(|(&n, &h)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

/// False candidates whose superclass is not shared by any true label.
pub fn cross_superclass_flips(ds: &PartialDataset) -> Result<usize> {
    let sup = ds
        .label_space
        .superclasses()
        .ok_or_else(|| CoreError::Invalid("audit needs a superclass map".into()))?;
    let mut count = 0;
    for r in &ds.records {
        let allowed: BTreeSet<&str> = r.ground_truth.iter().map(|&k| sup[k].as_str()).collect();
        count += r
            .candidate
            .difference(&r.ground_truth)
            .filter(|&&j| !allowed.contains(sup[j].as_str()))
            .count();
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn space(c: usize) -> LabelSpace {
        LabelSpace::new((0..c).map(|i| format!("c{i}")).collect(), None).unwrap()
    }

    fn dataset(n: usize, c: usize) -> PartialDataset {
        let records = (0..n)
            .map(|i| SignalRecord {
                instance_id: format!("r{i}"),
                signal: Arc::from(vec![0.0; 2]),
                ground_truth: [i % c].into_iter().collect(),
                candidate: [i % c].into_iter().collect(),
                ambiguous: false,
                split: if i % 5 == 4 { Split::Test } else { Split::Train },
            })
            .collect();
        PartialDataset {
            label_space: space(c),
            leads: 1,
            length: 2,
            records,
            provenance: None,
        }
    }

    #[test]
    fn class_level_epsilon_averages_rows() {
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let t = TransitionMatrix::new(
            MatrixKind::Class,
            names.clone(),
            names,
            vec![vec![0.0, 0.2, 0.4], vec![0.6, 0.0, 0.0], vec![0.1, 0.1, 0.0]],
        )
        .unwrap();
        let one = epsilon_class_level(&t, &[2].into_iter().collect());
        assert_eq!(one, vec![0.1, 0.1, 0.0]);
        let two = epsilon_class_level(&t, &[0, 1].into_iter().collect());
        assert!((two[0] - 0.3).abs() < 1e-15 && (two[1] - 0.1).abs() < 1e-15 && (two[2] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn r_cap_truncates_added_labels() {
        let ds = dataset(200, 10);
        let mut cfg = GenerationConfig::random(1.0, 1.0, 3);
        cfg.r = Some(2);
        let out = generate_candidates(&ds, &cfg, None).unwrap();
        for r in out.records.iter().filter(|r| r.split == Split::Train) {
            assert_eq!(r.candidate.len(), r.ground_truth.len() + 2);
        }
    }

    #[test]
    fn test_split_untouched() {
        let ds = dataset(100, 4);
        let out = generate_candidates(&ds, &GenerationConfig::random(1.0, 1.0, 1), None).unwrap();
        for (a, b) in ds.records.iter().zip(&out.records) {
            if a.split == Split::Test {
                assert_eq!(a, b);
            } else {
                assert_eq!(b.candidate.len(), 4);
            }
        }
    }

    #[test]
    fn missing_matrix_is_an_error() {
        let ds = dataset(10, 3);
        let mut cfg = GenerationConfig::random(0.5, 0.5, 1);
        cfg.strategy = Strategy::Taxonomy;
        assert!(matches!(generate_candidates(&ds, &cfg, None), Err(CoreError::MissingMatrix(_))));
    }

    #[test]
    fn model_driven_rows() {
        let ds = dataset(3, 3);
        let preds = vec![vec![0.9, 0.2, 0.4], vec![0.0, 0.7, 0.0], vec![0.3, 0.3, 0.8]];
        let t = build_model_driven_matrix(&preds, &ds).unwrap();
        assert_eq!(t.values[0], vec![0.0, 0.5, 1.0]);
        assert_eq!(t.values[1], vec![0.0, 0.0, 0.0]);
        assert_eq!(t.values[2], vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
    }
}

//! Synthetic multi-label signal datasets with class template morphologies.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, LabelSet, LabelSpace, PartialDataset, SignalRecord, Split};
use crate::error::{invalid, Result};
use crate::io::{save_dataset, write_features, write_matrix, FEATURES};
use crate::rng::keyed;
use crate::similarity::{MatrixKind, TransitionMatrix};

pub const TREATMENT_FILE: &str = "treatment.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub instances: usize,
    pub leads: usize,
    pub length: usize,
    pub superclasses: usize,
    pub seed: u64,
    pub test_fraction: f64,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    /// Probability that a record carries a second label.
    pub second_label: f64,
    /// Exponent of the long-tailed class frequency `(k + 1)^−tail`.
    pub tail: f64,
    /// Weight of the superclass morphology shared by sibling classes.
    pub shared: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            instances: 2000,
            leads: 2,
            length: 64,
            superclasses: 3,
            seed: 0,
            test_fraction: 0.2,
            noise: 0.4,
            second_label: 0.2,
            tail: 0.6,
            shared: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return invalid("need at least 2 classes");
        }
        if self.instances < self.classes {
            return invalid(format!("{} instances cannot cover {} classes", self.instances, self.classes));
        }
        if self.superclasses == 0 || self.superclasses > self.classes {
            return invalid("superclasses must lie in 1..=classes");
        }
        if self.leads == 0 || self.length < 8 {
            return invalid("need at least one lead and 8 samples");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return invalid("test_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.second_label) || !(0.0..=1.0).contains(&self.shared) {
            return invalid("second_label and shared must lie in [0, 1]");
        }
        if !(self.noise >= 0.0) || !(self.tail >= 0.0) {
            return invalid("noise and tail must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: PartialDataset,
    pub features: FeatureTable,
    pub treatment: TransitionMatrix,
    /// Per class, the `[leads × length]` template.
    pub templates: Vec<Vec<f64>>,
}

fn bump(len: usize, center: f64, width: f64, amp: f64) -> impl Iterator<Item = f64> {
    (0..len).map(move |t| {
        let d = (t as f64 - center) / width;
        amp * (-0.5 * d * d).exp()
    })
}

fn random_wave<R: Rng>(leads: usize, len: usize, bumps: usize, rng: &mut R) -> Vec<f64> {
    let mut w = vec![0.0; leads * len];
    for l in 0..leads {
        for _ in 0..bumps {
            let center = rng.random_range(0.0..len as f64);
            let width = rng.random_range(1.5..4.0);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let amp = sign * rng.random_range(0.7..1.3);
            for (dst, v) in w[l * len..(l + 1) * len].iter_mut().zip(bump(len, center, width, amp)) {
                *dst += v;
            }
        }
    }
    w
}

fn weighted_pick<R: Rng>(weights: &[f64], exclude: Option<usize>, rng: &mut R) -> usize {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != exclude)
        .map(|(_, w)| w)
        .sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if Some(k) == exclude {
            continue;
        }
        last = k;
        if u < w {
            return k;
        }
        u -= w;
    }
    last
}

pub fn class_name(k: usize) -> String {
    format!("c{k:02}")
}

pub fn superclass_name(s: usize) -> String {
    format!("sc{s}")
}

/// Superclass of class `k`: classes are dealt out in contiguous blocks.
pub fn superclass_index(k: usize, classes: usize, superclasses: usize) -> usize {
    k * superclasses / classes
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (c, leads, len) = (cfg.classes, cfg.leads, cfg.length);
    let width = leads * len;
    let mut rng = keyed(cfg.seed, "synth/templates");
    let bases: Vec<Vec<f64>> = (0..cfg.superclasses).map(|_| random_wave(leads, len, 2, &mut rng)).collect();
    let templates: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let own = random_wave(leads, len, 2, &mut rng);
            let base = &bases[superclass_index(k, c, cfg.superclasses)];
            own.iter()
                .zip(base)
                .map(|(o, b)| cfg.shared * b + (1.0 - cfg.shared) * o)
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..c).map(|k| (k as f64 + 1.0).powf(-cfg.tail)).collect();

    let mut rng = keyed(cfg.seed, "synth/records");
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| crate::error::CoreError::Invalid(e.to_string()))?;
    let mut truths: Vec<LabelSet> = Vec::with_capacity(cfg.instances);
    let mut signals: Vec<Vec<f64>> = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let first = if i < c { i } else { weighted_pick(&weights, None, &mut rng) };
        let mut truth = LabelSet::from([first]);
        if rng.random::<f64>() < cfg.second_label {
            truth.insert(weighted_pick(&weights, Some(first), &mut rng));
        }
        let mut x = vec![0.0; width];
        for &k in &truth {
            let a = rng.random_range(0.8..1.2);
            for (dst, v) in x.iter_mut().zip(&templates[k]) {
                *dst += a * v;
            }
        }
        for v in x.iter_mut() {
            *v = (*v + noise.sample(&mut rng)) as f32 as f64;
        }
        truths.push(truth);
        signals.push(x);
    }

    let mut order: Vec<usize> = (0..cfg.instances).collect();
    order.shuffle(&mut keyed(cfg.seed, "synth/split"));
    let n_test = (cfg.instances as f64 * cfg.test_fraction).round() as usize;
    let mut split = vec![Split::Train; cfg.instances];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }

    let ids: Vec<String> = (0..cfg.instances).map(|i| format!("r{i:05}")).collect();
    let norms: Vec<f64> = templates.iter().map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let feature_rows: Vec<Vec<f64>> = signals
        .iter()
        .map(|x| {
            templates
                .iter()
                .zip(&norms)
                .map(|(t, n)| x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / n)
                .collect()
        })
        .collect();
    let features = FeatureTable::new(ids.clone(), feature_rows)?;

    let records = (0..cfg.instances)
        .map(|i| SignalRecord {
            instance_id: ids[i].clone(),
            signal: Arc::from(std::mem::take(&mut signals[i])),
            ground_truth: truths[i].clone(),
            candidate: truths[i].clone(),
            ambiguous: false,
            split: split[i],
        })
        .collect();
    let names: Vec<String> = (0..c).map(class_name).collect();
    let sup: Vec<String> = (0..c)
        .map(|k| superclass_name(superclass_index(k, c, cfg.superclasses)))
        .collect();
    let dataset = PartialDataset {
        label_space: LabelSpace::new(names.clone(), Some(sup))?,
        leads,
        length: len,
        records,
        provenance: None,
    };

    let mut rng = keyed(cfg.seed, "synth/treatment");
    let values: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            (0..c)
                .map(|k| {
                    if j == k {
                        return 0.0;
                    }
                    let same = superclass_index(j, c, cfg.superclasses) == superclass_index(k, c, cfg.superclasses);
                    let base = if same { 0.4 } else { 0.05 };
                    let v: f64 = base + rng.random_range(0.0..0.1);
                    (v * 100.0).round() / 100.0
                })
                .collect()
        })
        .collect();
    let treatment = TransitionMatrix::new(MatrixKind::Class, names.clone(), names, values)?;
    Ok(SynthDataset {
        dataset,
        features,
        treatment,
        templates,
    })
}

/// Writes the dataset, its feature table and a treatment matrix file.
pub fn write_synth(dir: &Path, s: &SynthDataset) -> Result<()> {
    write_features(&dir.join(FEATURES), &s.features)?;
    write_matrix(&dir.join(TREATMENT_FILE), &s.treatment)?;
    save_dataset(&s.dataset, dir)
}

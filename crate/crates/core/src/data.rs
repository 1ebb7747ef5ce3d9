//! Dataset model shared by the generators, learners and analyses.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type LabelSet = BTreeSet<usize>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    class_names: Vec<String>,
    superclass_of: Option<Vec<String>>,
}

impl LabelSpace {
    pub fn new(class_names: Vec<String>, superclass_of: Option<Vec<String>>) -> Result<Self> {
        if class_names.len() < 2 {
            return invalid(format!("need at least 2 classes, got {}", class_names.len()));
        }
        let unique: BTreeSet<&String> = class_names.iter().collect();
        if unique.len() != class_names.len() {
            return invalid("class names must be unique");
        }
        if let Some(sup) = &superclass_of {
            if sup.len() != class_names.len() {
                return invalid("superclass map must cover every class");
            }
        }
        Ok(Self {
            class_names,
            superclass_of,
        })
    }

    /// Builds the space from a name→superclass map, checking coverage.
    pub fn with_superclass_map(
        class_names: Vec<String>,
        map: &BTreeMap<String, String>,
    ) -> Result<Self> {
        if map.is_empty() {
            return Self::new(class_names, None);
        }
        let mut sup = Vec::with_capacity(class_names.len());
        for name in &class_names {
            match map.get(name) {
                Some(s) => sup.push(s.clone()),
                None => return invalid(format!("superclass map lacks class {name:?}")),
            }
        }
        if let Some(extra) = map.keys().find(|k| !class_names.contains(k)) {
            return invalid(format!("superclass map names unknown class {extra:?}"));
        }
        Self::new(class_names, Some(sup))
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn superclasses(&self) -> Option<&[String]> {
        self.superclass_of.as_deref()
    }

    pub fn superclass_map(&self) -> BTreeMap<String, String> {
        match &self.superclass_of {
            Some(sup) => self
                .class_names
                .iter()
                .cloned()
                .zip(sup.iter().cloned())
                .collect(),
            None => BTreeMap::new(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub instance_id: String,
    /// `[leads × length]`, row-major.
    pub signal: Arc<[f64]>,
    pub ground_truth: LabelSet,
    pub candidate: LabelSet,
    pub ambiguous: bool,
    pub split: Split,
}

/// How a dataset's candidate sets were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    pub p: f64,
    pub epsilon: f64,
    pub r: Option<usize>,
    pub seed: u64,
    pub matrix_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialDataset {
    pub label_space: LabelSpace,
    pub leads: usize,
    pub length: usize,
    pub records: Vec<SignalRecord>,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub record: Option<String>,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.record {
            Some(id) => write!(f, "{id}: {}", self.rule),
            None => write!(f, "{}", self.rule),
        }
    }
}

impl PartialDataset {
    pub fn num_classes(&self) -> usize {
        self.label_space.num_classes()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Test)
    }

    fn indices_of(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Resets every candidate set to its ground truth.
    pub fn cleaned(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.candidate = r.ground_truth.clone();
            r.ambiguous = false;
        }
        out.provenance = None;
        out
    }

    /// Per-class counts of candidate labels over the train split.
    pub fn train_candidate_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in self.records.iter().filter(|r| r.split == Split::Train) {
            for &c in &r.candidate {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Per-class counts of ground-truth labels over the train split.
    pub fn train_label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in self.records.iter().filter(|r| r.split == Split::Train) {
            for &c in &r.ground_truth {
                counts[c] += 1;
            }
        }
        counts
    }
}

/// Lists every broken dataset invariant; an empty list means the dataset is valid.
pub fn validate_dataset(ds: &PartialDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let c = ds.num_classes();
    let mut push = |record: Option<&str>, rule: String| {
        out.push(Violation {
            record: record.map(str::to_owned),
            rule,
        })
    };
    if ds.records.is_empty() {
        push(None, "dataset has no records".into());
    }
    let expected = ds.leads * ds.length;
    let mut seen = HashSet::new();
    for r in &ds.records {
        let id = Some(r.instance_id.as_str());
        if !seen.insert(r.instance_id.as_str()) {
            push(id, "duplicate instance_id".into());
        }
        if r.signal.len() != expected {
            push(
                id,
                format!("signal has {} values, expected {expected}", r.signal.len()),
            );
        }
        if r.signal.iter().any(|v| !v.is_finite()) {
            push(id, "signal contains non-finite values".into());
        }
        if r.ground_truth.is_empty() {
            push(id, "ground truth is empty".into());
        }
        if let Some(&bad) = r.candidate.iter().chain(&r.ground_truth).find(|&&k| k >= c) {
            push(id, format!("label index {bad} outside label space of {c}"));
        }
        if !r.ground_truth.is_subset(&r.candidate) {
            push(id, "candidate set does not contain ground truth".into());
        }
        if !r.ambiguous && r.candidate != r.ground_truth {
            push(id, "unflagged record has extra candidates".into());
        }
        if r.split == Split::Test && r.candidate != r.ground_truth {
            push(id, "test split not clean".into());
        }
    }
    out
}

/// Per-instance feature vectors `ψ(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return invalid("feature ids and rows differ in length");
        }
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 && !rows.is_empty() {
            return invalid("feature rows are empty");
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, (id, row)) in ids.iter().zip(&rows).enumerate() {
            if row.len() != dim {
                return invalid(format!("{id}: feature row has {} values, expected {dim}", row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return invalid(format!("{id}: feature row has non-finite entries"));
            }
            if index.insert(id.clone(), i).is_some() {
                return invalid(format!("{id}: duplicate feature row"));
            }
        }
        Ok(Self { ids, rows, index })
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }
}

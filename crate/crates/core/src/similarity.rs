//! Prototypes, cosine similarity and transition matrices.

use sha2::{Digest, Sha256};

use crate::data::{FeatureTable, PartialDataset};
use crate::error::{invalid, CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypeSet {
    /// `None` where the class has no supporting instance.
    pub prototypes: Vec<Option<Vec<f64>>>,
    pub support_counts: Vec<usize>,
}

impl ClassPrototypeSet {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.prototypes.get(class).and_then(|p| p.as_deref())
    }
}

/// Mean feature row of each class; multi-label instances count toward every
/// ground-truth class they carry.
pub fn compute_class_prototypes(
    features: &FeatureTable,
    ds: &PartialDataset,
) -> Result<ClassPrototypeSet> {
    let c = ds.num_classes();
    let f = features.dim();
    let mut sums = vec![vec![0.0; f]; c];
    let mut counts = vec![0usize; c];
    for r in &ds.records {
        if r.ground_truth.is_empty() {
            continue;
        }
        let row = features
            .get(&r.instance_id)
            .ok_or_else(|| CoreError::Invalid(format!("{}: no feature row", r.instance_id)))?;
        for &k in &r.ground_truth {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(ClassPrototypeSet {
        prototypes,
        support_counts: counts,
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("cosine of vectors of length {} and {}", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::UndefinedSimilarity("zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixKind {
    /// `C × C`, rows and columns are classes.
    Class,
    /// `n × C`, rows are instances.
    Instance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub kind: MatrixKind,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn new(
        kind: MatrixKind,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if values.len() != row_labels.len() {
            return invalid(format!(
                "matrix has {} rows but {} row labels",
                values.len(),
                row_labels.len()
            ));
        }
        if let Some(row) = values.iter().find(|r| r.len() != col_labels.len()) {
            return invalid(format!(
                "matrix row has {} entries, expected {}",
                row.len(),
                col_labels.len()
            ));
        }
        if kind == MatrixKind::Class && row_labels.len() != col_labels.len() {
            return invalid("class-level matrix must be square");
        }
        Ok(Self {
            kind,
            row_labels,
            col_labels,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn in_unit_range(&self) -> bool {
        self.entries().all(|v| (0.0..=1.0).contains(&v))
    }

    /// SHA-256 over the shape and the little-endian bytes of every entry.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows() as u64).to_le_bytes());
        h.update((self.cols() as u64).to_le_bytes());
        for v in self.entries() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn affine_normalize(t: &TransitionMatrix, lo: f64, hi: f64) -> Result<TransitionMatrix> {
    if !(hi > lo) {
        return Err(CoreError::DegenerateNormalization(lo));
    }
    let mut out = t.clone();
    for row in &mut out.values {
        for v in row.iter_mut() {
            *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// `(t − min T) / (max T − min T)` over the whole matrix.
pub fn minmax_normalize(t: &TransitionMatrix) -> Result<TransitionMatrix> {
    let lo = t.entries().fold(f64::INFINITY, f64::min);
    let hi = t.entries().fold(f64::NEG_INFINITY, f64::max);
    affine_normalize(t, lo, hi)
}

/// Min-max normalisation whose range is taken over off-diagonal entries only;
/// the diagonal is mapped with the same affine transform and clamped.
pub fn minmax_normalize_offdiag(t: &TransitionMatrix) -> Result<TransitionMatrix> {
    let off = t
        .values
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, v)| *v));
    let (lo, hi) = off.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    affine_normalize(t, lo, hi)
}

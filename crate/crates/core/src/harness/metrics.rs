use crate::data::LabelSet;
use crate::error::{invalid, Result};

/// Pooled `2·TP / (2·TP + FP + FN)`; 0 when nothing is predicted or true.
pub fn micro_f1(pred: &[LabelSet], truth: &[LabelSet]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let hit = p.intersection(t).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += t.len() - hit;
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mann–Whitney `U / (n⁺ n⁻)` with midranks; `None` without both classes.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Per-class AUROC averaged over classes with both positives and negatives.
pub fn macro_auroc(scores: &[Vec<f64>], truth: &[LabelSet], c: usize) -> Result<f64> {
    let vals: Vec<f64> = per_class_auroc(scores, truth, c).into_iter().flatten().collect();
    if vals.is_empty() {
        return invalid("no class has both positive and negative instances");
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn per_class_auroc(scores: &[Vec<f64>], truth: &[LabelSet], c: usize) -> Vec<Option<f64>> {
    (0..c)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let y: Vec<bool> = truth.iter().map(|t| t.contains(&k)).collect();
            auroc(&s, &y)
        })
        .collect()
}

/// F1 per class; `None` for classes with no true instance.
pub fn per_class_f1(pred: &[LabelSet], truth: &[LabelSet], c: usize) -> Vec<Option<f64>> {
    (0..c)
        .map(|k| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (p, t) in pred.iter().zip(truth) {
                match (p.contains(&k), t.contains(&k)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            (tp + fn_ > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        })
        .collect()
}

/// Labels whose score reaches the threshold.
pub fn threshold(scores: &[f64], at: f64) -> LabelSet {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= at)
        .map(|(k, _)| k)
        .collect()
}

/// Sample mean and standard deviation with `ddof = 1`; the deviation of a
/// single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

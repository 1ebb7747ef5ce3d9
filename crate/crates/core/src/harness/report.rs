use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::metrics::mean_std;
use super::sweep::{self, fmt_opt, PerClassEntry, SeedKey, SweepRow};
use crate::ambiguity::Strategy;
use crate::error::Result;
use crate::io::write_csv;
use crate::pll::Algorithm;

pub const DEGRADATION_COLUMNS: [&str; 11] = [
    "strategy",
    "p",
    "epsilon",
    "algorithm",
    "n",
    "micro_f1_mean",
    "micro_f1_std",
    "macro_auroc_mean",
    "macro_auroc_std",
    "flip_probability_mean",
    "flip_probability_std",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationRow {
    pub strategy: Strategy,
    pub p: f64,
    pub epsilon: f64,
    pub algorithm: Algorithm,
    pub n: usize,
    pub micro_f1: Option<(f64, f64)>,
    pub macro_auroc: Option<(f64, f64)>,
    pub flip_probability: Option<(f64, f64)>,
}

/// Mean and std per `(strategy, p, ε, algorithm)`, recomputed from the
/// successful per-seed rows only.
pub fn degradation(rows: &[SweepRow]) -> Vec<DegradationRow> {
    let seeds: Vec<SweepRow> = rows.iter().filter(|r| matches!(r.seed, SeedKey::Seed(_))).cloned().collect();
    let grouped = sweep::with_aggregates(seeds);
    let mut out = Vec::new();
    let mut start = 0;
    for (i, r) in grouped.iter().enumerate() {
        if r.seed != SeedKey::Mean {
            continue;
        }
        let ok: Vec<&SweepRow> = grouped[start..i].iter().filter(|r| r.status == "ok").collect();
        let stat = |f: fn(&SweepRow) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| mean_std(&v))
        };
        out.push(DegradationRow {
            strategy: r.strategy,
            p: r.p,
            epsilon: r.epsilon,
            algorithm: r.algorithm,
            n: ok.len(),
            micro_f1: stat(|r| r.micro_f1),
            macro_auroc: stat(|r| r.macro_auroc),
            flip_probability: stat(|r| r.flip_probability),
        });
        start = i + 2;
    }
    out
}

fn pair(v: Option<(f64, f64)>) -> [String; 2] {
    [fmt_opt(v.map(|x| x.0)), fmt_opt(v.map(|x| x.1))]
}

fn degradation_body(rows: &[&DegradationRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let mut v = vec![
                r.strategy.to_string(),
                r.p.to_string(),
                r.epsilon.to_string(),
                r.algorithm.to_string(),
                r.n.to_string(),
            ];
            v.extend(pair(r.micro_f1));
            v.extend(pair(r.macro_auroc));
            v.extend(pair(r.flip_probability));
            v
        })
        .collect()
}

/// Per-class F1 averaged over seeds: one table per `(strategy, p, ε)`, rows
/// ordered by train frequency, one column per algorithm.
pub fn per_class_matrices(entries: &[PerClassEntry]) -> Vec<(String, Vec<String>, Vec<Vec<String>>)> {
    type Key = (usize, u64, u64);
    let mut tables: BTreeMap<Key, (Strategy, f64, f64, Vec<&PerClassEntry>)> = BTreeMap::new();
    for e in entries {
        let rank = Strategy::ALL.iter().position(|&s| s == e.strategy).expect("listed");
        let key = (rank, e.p.to_bits(), e.epsilon.to_bits());
        tables.entry(key).or_insert((e.strategy, e.p, e.epsilon, Vec::new())).3.push(e);
    }
    let mut out = Vec::new();
    for (_, (strategy, p, epsilon, list)) in tables {
        let algorithms: Vec<Algorithm> = Algorithm::ALL
            .into_iter()
            .filter(|a| list.iter().any(|e| e.algorithm == *a))
            .collect();
        let mut classes: Vec<(String, usize)> = Vec::new();
        for e in &list {
            if !classes.iter().any(|(c, _)| *c == e.class) {
                classes.push((e.class.clone(), e.train_count));
            }
        }
        classes.sort_by(|a, b| b.1.cmp(&a.1));
        let mut header = vec!["class".to_string(), "train_count".to_string()];
        header.extend(algorithms.iter().map(|a| a.to_string()));
        let body = classes
            .iter()
            .map(|(class, count)| {
                let mut row = vec![class.clone(), count.to_string()];
                for a in &algorithms {
                    let v: Vec<f64> = list
                        .iter()
                        .filter(|e| e.algorithm == *a && e.class == *class)
                        .filter_map(|e| e.f1)
                        .collect();
                    row.push(fmt_opt((!v.is_empty()).then(|| mean_std(&v).0)));
                }
                row
            })
            .collect();
        out.push((format!("per_class_{strategy}_p{p}_e{epsilon}.csv"), header, body));
    }
    out
}

/// Renders a sweep directory into degradation and per-class tables; returns
/// the files written.
pub fn write_report(sweep_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let rows = sweep::read_results(&sweep_dir.join(sweep::RESULTS_FILE))?;
    let deg = degradation(&rows);
    let header: Vec<String> = DEGRADATION_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut written = Vec::new();
    let all: Vec<&DegradationRow> = deg.iter().collect();
    let path = out.join("degradation.csv");
    write_csv(&path, &header, &degradation_body(&all))?;
    written.push(path);
    for s in Strategy::ALL {
        let part: Vec<&DegradationRow> = deg.iter().filter(|r| r.strategy == s).collect();
        if part.is_empty() {
            continue;
        }
        let path = out.join(format!("degradation_{s}.csv"));
        write_csv(&path, &header, &degradation_body(&part))?;
        written.push(path);
    }
    let pc_path = sweep_dir.join(sweep::PER_CLASS_FILE);
    if pc_path.exists() {
        let entries = sweep::read_per_class(&pc_path)?;
        for (name, header, body) in per_class_matrices(&entries) {
            let path = out.join(name);
            write_csv(&path, &header, &body)?;
            written.push(path);
        }
    }
    Ok(written)
}

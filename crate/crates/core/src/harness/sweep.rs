use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SweepGrid};
use super::metrics::mean_std;
use super::train::{evaluate_test, per_class_report, predict_scores, train, write_history, EpochRecord};
use crate::ambiguity::{
    build_class_cardiologist_matrix, build_instance_cardiologist_matrix, build_model_driven_matrix,
    build_taxonomy_matrix, flip_probability, generate_candidates, GenerationConfig, Strategy,
};
use crate::data::{FeatureTable, PartialDataset};
use crate::error::{CoreError, Result};
use crate::io::write_csv;
use crate::pll::Algorithm;
use crate::similarity::{compute_class_prototypes, TransitionMatrix};

pub const RESULTS_FILE: &str = "results.csv";
pub const PER_CLASS_FILE: &str = "per_class.csv";
pub const HISTORY_DIR: &str = "history";

pub const RESULT_COLUMNS: [&str; 10] = [
    "strategy",
    "p",
    "epsilon",
    "algorithm",
    "seed",
    "micro_f1",
    "macro_auroc",
    "flip_probability",
    "runtime_s",
    "status",
];

pub const PER_CLASS_COLUMNS: [&str; 8] = ["strategy", "p", "epsilon", "algorithm", "seed", "class", "train_count", "f1"];

/// Inputs for strategies whose matrix cannot be derived from labels alone.
#[derive(Clone, Debug, Default)]
pub struct MatrixInputs {
    pub features: Option<FeatureTable>,
    pub treatment: Option<TransitionMatrix>,
    pub model_driven: Option<TransitionMatrix>,
}

/// Sigmoid scores for every record from a baseline trained on clean labels.
pub fn model_driven_predictions(clean: &PartialDataset, exp: &ExperimentConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let clean = clean.cleaned();
    let model = train(&clean, Algorithm::NoPll, &exp.hyper, &exp.backbone, &exp.optimizer, seed)?;
    let all: Vec<usize> = (0..clean.records.len()).collect();
    predict_scores(model.learner.as_ref(), &clean, &all)
}

pub fn model_driven_matrix(clean: &PartialDataset, exp: &ExperimentConfig, seed: u64) -> Result<TransitionMatrix> {
    let preds = model_driven_predictions(clean, exp, seed)?;
    build_model_driven_matrix(&preds, clean)
}

/// The transition matrix a strategy samples from, `None` for random.
pub fn strategy_matrix(
    strategy: Strategy,
    epsilon: f64,
    clean: &PartialDataset,
    inputs: &MatrixInputs,
) -> Result<Option<TransitionMatrix>> {
    let features = || {
        inputs
            .features
            .as_ref()
            .ok_or_else(|| CoreError::Invalid(format!("strategy {strategy} needs a feature table")))
    };
    Ok(match strategy {
        Strategy::Random => None,
        Strategy::Taxonomy => Some(build_taxonomy_matrix(&clean.label_space, epsilon)?),
        Strategy::Treatment => Some(inputs.treatment.clone().ok_or(CoreError::MissingMatrix("treatment"))?),
        Strategy::ClassCardiologist => {
            let protos = compute_class_prototypes(features()?, clean)?;
            Some(build_class_cardiologist_matrix(&protos, &clean.label_space)?)
        }
        Strategy::InstanceCardiologist => {
            let f = features()?;
            let protos = compute_class_prototypes(f, clean)?;
            Some(build_instance_cardiologist_matrix(f, &protos, clean)?)
        }
        Strategy::ModelDriven => Some(inputs.model_driven.clone().ok_or(CoreError::MissingMatrix("model-driven"))?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeedKey {
    Seed(u64),
    Mean,
    Std,
}

impl std::fmt::Display for SeedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeedKey::Seed(s) => write!(f, "{s}"),
            SeedKey::Mean => f.write_str("mean"),
            SeedKey::Std => f.write_str("std"),
        }
    }
}

impl std::str::FromStr for SeedKey {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(SeedKey::Mean),
            "std" => Ok(SeedKey::Std),
            _ => s
                .parse()
                .map(SeedKey::Seed)
                .map_err(|_| CoreError::Invalid(format!("bad seed field {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub p: f64,
    pub epsilon: f64,
    pub algorithm: Algorithm,
    pub seed: SeedKey,
    pub micro_f1: Option<f64>,
    pub macro_auroc: Option<f64>,
    pub flip_probability: Option<f64>,
    pub runtime_s: Option<f64>,
    /// `ok`, `failed`, or for aggregate rows the number of seeds used.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerClassEntry {
    pub strategy: Strategy,
    pub p: f64,
    pub epsilon: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub class: String,
    pub train_count: usize,
    pub f1: Option<f64>,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub per_class: Vec<PerClassEntry>,
    pub histories: Vec<(String, Vec<EpochRecord>)>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status == "failed").count()
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    strategy: Strategy,
    p: f64,
    epsilon: f64,
    algorithm: Algorithm,
    seed: u64,
}

fn strategy_rank(s: Strategy) -> usize {
    Strategy::ALL.iter().position(|&x| x == s).expect("listed")
}

fn algorithm_rank(a: Algorithm) -> usize {
    Algorithm::ALL.iter().position(|&x| x == a).expect("listed")
}

fn cell_order(a: (Strategy, f64, f64, Algorithm), b: (Strategy, f64, f64, Algorithm)) -> std::cmp::Ordering {
    strategy_rank(a.0)
        .cmp(&strategy_rank(b.0))
        .then(a.1.total_cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
        .then(algorithm_rank(a.3).cmp(&algorithm_rank(b.3)))
}

pub fn run_name(strategy: Strategy, p: f64, epsilon: f64, algorithm: Algorithm, seed: u64) -> String {
    format!("{strategy}_p{p}_e{epsilon}_{algorithm}_s{seed}")
}

struct CellResult {
    row: SweepRow,
    per_class: Vec<PerClassEntry>,
    history: Vec<EpochRecord>,
}

fn run_cell(
    clean: &PartialDataset,
    matrix: Option<&TransitionMatrix>,
    cell: Cell,
    grid: &SweepGrid,
    exp: &ExperimentConfig,
    timing: bool,
) -> Result<CellResult> {
    let start = Instant::now();
    let gen = GenerationConfig {
        strategy: cell.strategy,
        p: cell.p,
        epsilon: cell.epsilon,
        r: grid.r,
        seed: cell.seed,
    };
    let ds = generate_candidates(clean, &gen, matrix)?;
    let flip = flip_probability(&ds);
    let model = train(&ds, cell.algorithm, &exp.hyper, &exp.backbone, &exp.optimizer, cell.seed)?;
    let eval = evaluate_test(model.learner.as_ref(), &ds)?;
    let per_class = per_class_report(&ds, &eval.per_class_f1)
        .into_iter()
        .map(|r| PerClassEntry {
            strategy: cell.strategy,
            p: cell.p,
            epsilon: cell.epsilon,
            algorithm: cell.algorithm,
            seed: cell.seed,
            class: r.class,
            train_count: r.train_count,
            f1: r.f1,
        })
        .collect();
    Ok(CellResult {
        row: SweepRow {
            strategy: cell.strategy,
            p: cell.p,
            epsilon: cell.epsilon,
            algorithm: cell.algorithm,
            seed: SeedKey::Seed(cell.seed),
            micro_f1: Some(eval.micro_f1),
            macro_auroc: Some(eval.macro_auroc),
            flip_probability: Some(flip),
            runtime_s: timing.then(|| start.elapsed().as_secs_f64()),
            status: "ok".into(),
        },
        per_class,
        history: model.history,
    })
}

/// Runs every `(strategy, p, ε, algorithm, seed)` cell on `jobs` threads.
/// Failed cells become rows with status `failed`; the sweep continues.
pub fn run_sweep(
    clean: &PartialDataset,
    exp: &ExperimentConfig,
    inputs: &MatrixInputs,
    jobs: usize,
    timing: bool,
) -> Result<SweepOutcome> {
    let grid = &exp.sweep;
    grid.validate()?;
    exp.validate()?;
    let mut cells = Vec::new();
    let mut matrices = Vec::new();
    for &strategy in &grid.strategies {
        for &epsilon in &grid.epsilon {
            let m = strategy_matrix(strategy, epsilon, clean, inputs)?;
            matrices.push(((strategy, epsilon.to_bits()), m));
            for &p in &grid.p {
                for &algorithm in &grid.algorithms {
                    for &seed in &exp.seeds {
                        cells.push(Cell {
                            strategy,
                            p,
                            epsilon,
                            algorithm,
                            seed,
                        });
                    }
                }
            }
        }
    }
    let lookup = |s: Strategy, e: f64| {
        matrices
            .iter()
            .find(|(k, _)| *k == (s, e.to_bits()))
            .and_then(|(_, m)| m.as_ref())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CoreError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<(Cell, Result<CellResult>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| (cell, run_cell(clean, lookup(cell.strategy, cell.epsilon), cell, grid, exp, timing)))
            .collect()
    });

    let mut seed_rows = Vec::new();
    let mut per_class = Vec::new();
    let mut histories = Vec::new();
    for (cell, res) in results {
        match res {
            Ok(r) => {
                seed_rows.push(r.row);
                per_class.extend(r.per_class);
                histories.push((run_name(cell.strategy, cell.p, cell.epsilon, cell.algorithm, cell.seed), r.history));
            }
            Err(e) => {
                log::error!(
                    "{}: {e}",
                    run_name(cell.strategy, cell.p, cell.epsilon, cell.algorithm, cell.seed)
                );
                seed_rows.push(SweepRow {
                    strategy: cell.strategy,
                    p: cell.p,
                    epsilon: cell.epsilon,
                    algorithm: cell.algorithm,
                    seed: SeedKey::Seed(cell.seed),
                    micro_f1: None,
                    macro_auroc: None,
                    flip_probability: None,
                    runtime_s: None,
                    status: "failed".into(),
                });
            }
        }
    }
    let rows = with_aggregates(seed_rows);
    per_class.sort_by(|a, b| {
        cell_order((a.strategy, a.p, a.epsilon, a.algorithm), (b.strategy, b.p, b.epsilon, b.algorithm))
            .then(a.seed.cmp(&b.seed))
    });
    histories.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(SweepOutcome {
        rows,
        per_class,
        histories,
    })
}

/// Sorts per-seed rows and appends mean and std rows after each
/// `(strategy, p, ε, algorithm)` group, computed over its successful seeds.
pub fn with_aggregates(mut seed_rows: Vec<SweepRow>) -> Vec<SweepRow> {
    seed_rows.retain(|r| matches!(r.seed, SeedKey::Seed(_)));
    seed_rows.sort_by(|a, b| {
        cell_order((a.strategy, a.p, a.epsilon, a.algorithm), (b.strategy, b.p, b.epsilon, b.algorithm))
            .then(a.seed.cmp(&b.seed))
    });
    let mut out = Vec::with_capacity(seed_rows.len() + 2);
    let mut i = 0;
    while i < seed_rows.len() {
        let key = |r: &SweepRow| (r.strategy, r.p.to_bits(), r.epsilon.to_bits(), r.algorithm);
        let mut j = i;
        while j < seed_rows.len() && key(&seed_rows[j]) == key(&seed_rows[i]) {
            j += 1;
        }
        let group = &seed_rows[i..j];
        out.extend_from_slice(group);
        let ok: Vec<&SweepRow> = group.iter().filter(|r| r.status == "ok").collect();
        let stat = |f: fn(&SweepRow) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| mean_std(&v))
        };
        let f1 = stat(|r| r.micro_f1);
        let auc = stat(|r| r.macro_auroc);
        let flip = stat(|r| r.flip_probability);
        let rt = stat(|r| r.runtime_s);
        let first = &group[0];
        for (seed, pick) in [(SeedKey::Mean, 0usize), (SeedKey::Std, 1)] {
            let get = |s: Option<(f64, f64)>| s.map(|(m, d)| if pick == 0 { m } else { d });
            out.push(SweepRow {
                strategy: first.strategy,
                p: first.p,
                epsilon: first.epsilon,
                algorithm: first.algorithm,
                seed,
                micro_f1: get(f1),
                macro_auroc: get(auc),
                flip_probability: get(flip),
                runtime_s: get(rt),
                status: format!("n={}", ok.len()),
            });
        }
        i = j;
    }
    out
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub fn write_results(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                r.p.to_string(),
                r.epsilon.to_string(),
                r.algorithm.to_string(),
                r.seed.to_string(),
                fmt_opt(r.micro_f1),
                fmt_opt(r.macro_auroc),
                fmt_opt(r.flip_probability),
                fmt_opt(r.runtime_s),
                r.status.clone(),
            ]
        })
        .collect();
    write_csv(path, &header(&RESULT_COLUMNS), &body)
}

pub fn write_per_class(path: &Path, rows: &[PerClassEntry]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                r.p.to_string(),
                r.epsilon.to_string(),
                r.algorithm.to_string(),
                r.seed.to_string(),
                r.class.clone(),
                r.train_count.to_string(),
                fmt_opt(r.f1),
            ]
        })
        .collect();
    write_csv(path, &header(&PER_CLASS_COLUMNS), &body)
}

pub fn write_sweep(dir: &Path, outcome: &SweepOutcome) -> Result<()> {
    write_results(&dir.join(RESULTS_FILE), &outcome.rows)?;
    write_per_class(&dir.join(PER_CLASS_FILE), &outcome.per_class)?;
    for (name, h) in &outcome.histories {
        write_history(&dir.join(HISTORY_DIR).join(format!("{name}.jsonl")), h)?;
    }
    Ok(())
}

fn parse_opt(s: &str, path: &Path) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| CoreError::format(path, format!("bad number {s:?}")))
}

fn parse_num(s: &str, path: &Path) -> Result<f64> {
    parse_opt(s, path)?.ok_or_else(|| CoreError::format(path, "missing number"))
}

fn records(path: &Path, cols: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CoreError::format(path, e))?;
    let head = rdr.headers().map_err(|e| CoreError::format(path, e))?.clone();
    if head.iter().collect::<Vec<_>>() != cols {
        return Err(CoreError::format(path, format!("expected columns {}", cols.join(","))));
    }
    rdr.records()
        .map(|r| r.map_err(|e| CoreError::format(path, e)))
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<SweepRow>> {
    records(path, &RESULT_COLUMNS)?
        .iter()
        .map(|r| {
            Ok(SweepRow {
                strategy: r[0].parse()?,
                p: parse_num(&r[1], path)?,
                epsilon: parse_num(&r[2], path)?,
                algorithm: r[3].parse()?,
                seed: r[4].parse()?,
                micro_f1: parse_opt(&r[5], path)?,
                macro_auroc: parse_opt(&r[6], path)?,
                flip_probability: parse_opt(&r[7], path)?,
                runtime_s: parse_opt(&r[8], path)?,
                status: r[9].to_string(),
            })
        })
        .collect()
}

pub fn read_per_class(path: &Path) -> Result<Vec<PerClassEntry>> {
    records(path, &PER_CLASS_COLUMNS)?
        .iter()
        .map(|r| {
            Ok(PerClassEntry {
                strategy: r[0].parse()?,
                p: parse_num(&r[1], path)?,
                epsilon: parse_num(&r[2], path)?,
                algorithm: r[3].parse()?,
                seed: r[4]
                    .parse()
                    .map_err(|_| CoreError::format(path, format!("bad seed {:?}", &r[4])))?,
                class: r[5].to_string(),
                train_count: r[6]
                    .parse()
                    .map_err(|_| CoreError::format(path, format!("bad count {:?}", &r[6])))?,
                f1: parse_opt(&r[7], path)?,
            })
        })
        .collect()
}

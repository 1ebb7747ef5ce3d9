use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use pllforge_core::ambiguity::{
    class_flip_rates, cross_superclass_flips, flip_probability, generate_candidates, GenerationConfig, Strategy,
};
use pllforge_core::data::{validate_dataset, PartialDataset, Split};
use pllforge_core::harness::metrics::mean_std;
use pllforge_core::harness::report::write_report;
use pllforge_core::harness::sweep::{strategy_matrix, write_sweep, SeedKey};
use pllforge_core::harness::train::{evaluate, load_model, save_model, write_history};
use pllforge_core::harness::{evaluate_test, per_class_report, run_sweep, train as train_model, BackboneSpec, ExperimentConfig, GenerationSpec};
use pllforge_core::io::{load_dataset, read_features, save_dataset, write_bytes, write_csv, FEATURES};
use pllforge_core::synth::{synthesize, write_synth, SynthConfig, TREATMENT_FILE};
use serde::{Deserialize, Serialize};

use crate::inputs::{self, print_config, read_toml};
use crate::{AmbiguateArgs, AnalyzeArgs, EvalArgs, IngestArgs, ReportArgs, SweepArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn copy_if_present(from: &Path, to: &Path, name: &str) -> Result<()> {
    let src = from.join(name);
    if src.exists() {
        let bytes = std::fs::read(&src).with_context(|| format!("reading {}", src.display()))?;
        write_bytes(&to.join(name), &bytes)?;
    }
    Ok(())
}

fn split_counts(ds: &PartialDataset) -> (usize, usize) {
    (ds.train_indices().len(), ds.test_indices().len())
}

pub fn synth(a: SynthArgs) -> Result<u8> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(classes, instances, leads, length, superclasses, noise, seed);
    print_config("synth", &cfg);
    let s = synthesize(&cfg)?;
    write_synth(&a.out, &s)?;
    let (train, test) = split_counts(&s.dataset);
    println!(
        "wrote {} records ({train} train, {test} test), {} classes, {} leads x {} samples to {}",
        s.dataset.records.len(),
        s.dataset.num_classes(),
        cfg.leads,
        cfg.length,
        a.out.display()
    );
    Ok(0)
}

pub fn ingest(a: IngestArgs) -> Result<u8> {
    let ds = load_dataset(&a.input)?;
    let violations = validate_dataset(&ds);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return usage(format!("{} invariant violations in {}", violations.len(), a.input.display()));
    }
    let features = a.features.clone().or_else(|| {
        let p = a.input.join(FEATURES);
        p.exists().then_some(p)
    });
    if let Some(path) = &features {
        let table = read_features(path)?;
        let missing: Vec<&str> = ds
            .records
            .iter()
            .filter(|r| table.get(&r.instance_id).is_none())
            .map(|r| r.instance_id.as_str())
            .collect();
        if let Some(first) = missing.first() {
            return usage(format!("{}: no features for {} records, first {first}", path.display(), missing.len()));
        }
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        write_bytes(&a.out.join(FEATURES), &bytes)?;
    }
    copy_if_present(&a.input, &a.out, TREATMENT_FILE)?;
    save_dataset(&ds, &a.out)?;
    let (train, test) = split_counts(&ds);
    println!(
        "valid: {} records ({train} train, {test} test), {} classes; wrote {}",
        ds.records.len(),
        ds.num_classes(),
        a.out.display()
    );
    Ok(0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AmbiguateConfig {
    strategy: Strategy,
    p: f64,
    epsilon: f64,
    r: Option<usize>,
    seed: u64,
}

impl Default for AmbiguateConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Random,
            p: 0.0,
            epsilon: 0.5,
            r: None,
            seed: 0,
        }
    }
}

fn print_audit(ds: &PartialDataset) -> Result<()> {
    println!("flip probability: {}", flip_probability(ds));
    if ds.label_space.superclasses().is_some() {
        println!("cross-superclass flips: {}", cross_superclass_flips(ds)?);
    }
    Ok(())
}

pub fn ambiguate(a: AmbiguateArgs) -> Result<u8> {
    let mut cfg: AmbiguateConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => AmbiguateConfig::default(),
    };
    if let Some(s) = &a.strategy {
        cfg.strategy = inputs::parse(s)?;
    }
    if let Some(p) = a.p {
        cfg.p = p;
    }
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    if a.r.is_some() {
        cfg.r = a.r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    print_config("ambiguate", &cfg);
    let gen = GenerationConfig {
        strategy: cfg.strategy,
        p: cfg.p,
        epsilon: cfg.epsilon,
        r: cfg.r,
        seed: cfg.seed,
    };
    gen.validate()?;

    let ds = load_dataset(&a.input)?;
    let baseline = ExperimentConfig {
        backbone: BackboneSpec::linear(),
        ..ExperimentConfig::default()
    };
    let inputs = inputs::matrix_inputs(&[cfg.strategy], &a.input, &ds, &a.matrices, &baseline, cfg.seed)?;
    let matrix = strategy_matrix(cfg.strategy, cfg.epsilon, &ds, &inputs)?;
    let out = generate_candidates(&ds, &gen, matrix.as_ref())?;

    copy_if_present(&a.input, &a.out, FEATURES)?;
    copy_if_present(&a.input, &a.out, TREATMENT_FILE)?;
    save_dataset(&out, &a.out)?;
    let ambiguous = out.records.iter().filter(|r| r.ambiguous).count();
    println!("{ambiguous} of {} train records ambiguated", out.train_indices().len());
    print_audit(&out)?;
    Ok(0)
}

fn generation_overrides(a: &TrainArgs, cfg: &mut ExperimentConfig) -> Result<()> {
    if a.strategy.is_none() && a.p.is_none() && a.epsilon.is_none() && a.r.is_none() {
        return Ok(());
    }
    let base = cfg.generation.take();
    let strategy = match &a.strategy {
        Some(s) => inputs::parse(s)?,
        None => base.as_ref().map_or(Strategy::Random, |g| g.strategy),
    };
    let Some(p) = a.p.or(base.as_ref().map(|g| g.p)) else {
        return usage("candidate generation needs --p");
    };
    cfg.generation = Some(GenerationSpec {
        strategy,
        p,
        epsilon: a.epsilon.or(base.as_ref().map(|g| g.epsilon)).unwrap_or(0.5),
        r: a.r.or(base.as_ref().and_then(|g| g.r)),
        matrix: base.and_then(|g| g.matrix),
    });
    Ok(())
}

const METRIC_COLUMNS: [&str; 4] = ["seed", "micro_f1", "macro_auroc", "flip_probability"];
const PER_CLASS_COLUMNS: [&str; 3] = ["class", "train_count", "f1"];

fn per_class_rows(ds: &PartialDataset, f1: &[Option<f64>]) -> Vec<Vec<String>> {
    per_class_report(ds, f1)
        .into_iter()
        .map(|r| vec![r.class, r.train_count.to_string(), opt_cell(r.f1)])
        .collect()
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let mut cfg = inputs::experiment(&a.exp)?;
    generation_overrides(&a, &mut cfg)?;
    cfg.validate()?;
    print_config("train", &cfg);
    let dir = inputs::dataset_dir(&cfg)?;
    let loaded = load_dataset(&dir)?;

    let mut matrices = a.matrices.clone();
    if let Some(g) = &cfg.generation {
        if let Some(m) = &g.matrix {
            match g.strategy {
                Strategy::Treatment if matrices.treatment.is_none() => matrices.treatment = Some(m.clone()),
                Strategy::ModelDriven if matrices.model_matrix.is_none() => matrices.model_matrix = Some(m.clone()),
                _ => {}
            }
        }
    }

    let mut rows = Vec::new();
    let mut f1s = Vec::new();
    let mut aurocs = Vec::new();
    let mut flips = Vec::new();
    for &seed in &cfg.seeds {
        let ds = match &cfg.generation {
            Some(g) => {
                let clean = loaded.cleaned();
                let inputs = inputs::matrix_inputs(&[g.strategy], &dir, &clean, &matrices, &cfg, seed)?;
                let matrix = strategy_matrix(g.strategy, g.epsilon, &clean, &inputs)?;
                generate_candidates(&clean, &g.config(seed), matrix.as_ref())?
            }
            None => loaded.clone(),
        };
        let flip = flip_probability(&ds);
        let model = train_model(&ds, cfg.algorithm, &cfg.hyper, &cfg.backbone, &cfg.optimizer, seed)?;
        let eval = evaluate_test(model.learner.as_ref(), &ds)?;
        let run = a.out.join(format!("seed{seed}"));
        save_model(&run.join("model"), &model)?;
        write_history(&run.join("history.jsonl"), &model.history)?;
        write_csv(&run.join("per_class.csv"), &header(&PER_CLASS_COLUMNS), &per_class_rows(&ds, &eval.per_class_f1))?;
        println!(
            "seed {seed}: micro-F1 {:.4}, macro-AUROC {:.4}, flip probability {:.4}",
            eval.micro_f1, eval.macro_auroc, flip
        );
        rows.push(vec![
            seed.to_string(),
            eval.micro_f1.to_string(),
            eval.macro_auroc.to_string(),
            flip.to_string(),
        ]);
        f1s.push(eval.micro_f1);
        aurocs.push(eval.macro_auroc);
        flips.push(flip);
    }
    let stats = [mean_std(&f1s), mean_std(&aurocs), mean_std(&flips)];
    rows.push(std::iter::once(SeedKey::Mean.to_string()).chain(stats.iter().map(|s| s.0.to_string())).collect());
    rows.push(std::iter::once(SeedKey::Std.to_string()).chain(stats.iter().map(|s| s.1.to_string())).collect());
    write_csv(&a.out.join("metrics.csv"), &header(&METRIC_COLUMNS), &rows)?;
    write_bytes(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    println!(
        "mean micro-F1 {:.4} ± {:.4}, macro-AUROC {:.4} ± {:.4}",
        stats[0].0, stats[0].1, stats[1].0, stats[1].1
    );
    Ok(0)
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    let split = match a.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => return usage(format!("unknown split {other:?}, expected test or train")),
    };
    let (meta, learner) = load_model(&a.model)?;
    print_config("model", &meta);
    let ds = load_dataset(&a.data)?;
    let idx = match split {
        Split::Test => ds.test_indices(),
        Split::Train => ds.train_indices(),
    };
    if idx.is_empty() {
        return usage(format!("the {} split is empty", a.split));
    }
    let ev = evaluate(learner.as_ref(), &ds, &idx)?;
    println!("{} on {} {} records", meta.algorithm, idx.len(), a.split);
    println!("micro-F1 {}", ev.micro_f1);
    println!("macro-AUROC {}", ev.macro_auroc);
    if let Some(out) = &a.out {
        write_csv(
            &out.join("metrics.csv"),
            &header(&["split", "micro_f1", "macro_auroc"]),
            &[vec![a.split.clone(), ev.micro_f1.to_string(), ev.macro_auroc.to_string()]],
        )?;
        write_csv(&out.join("per_class.csv"), &header(&PER_CLASS_COLUMNS), &per_class_rows(&ds, &ev.per_class_f1))?;
    }
    Ok(0)
}

pub fn sweep(a: SweepArgs) -> Result<u8> {
    let mut cfg = inputs::experiment(&a.exp)?;
    if let Some(s) = &a.strategies {
        cfg.sweep.strategies = s.iter().map(|x| inputs::parse(x)).collect::<Result<_>>()?;
    }
    if let Some(al) = &a.algorithms {
        cfg.sweep.algorithms = al.iter().map(|x| inputs::parse(x)).collect::<Result<_>>()?;
    }
    if let Some(p) = &a.p {
        cfg.sweep.p = p.clone();
    }
    if let Some(e) = &a.epsilon {
        cfg.sweep.epsilon = e.clone();
    }
    if a.r.is_some() {
        cfg.sweep.r = a.r;
    }
    if a.jobs == 0 {
        return usage("--jobs must be at least 1");
    }
    cfg.validate()?;
    cfg.sweep.validate()?;
    print_config("sweep", &cfg);
    let dir = inputs::dataset_dir(&cfg)?;
    let clean = load_dataset(&dir)?.cleaned();
    let seed = cfg.seeds[0];
    let inputs = inputs::matrix_inputs(&cfg.sweep.strategies, &dir, &clean, &a.matrices, &cfg, seed)?;
    let outcome = run_sweep(&clean, &cfg, &inputs, a.jobs, a.timing)?;
    write_sweep(&a.out, &outcome)?;
    write_bytes(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    for r in outcome.rows.iter().filter(|r| r.seed == SeedKey::Mean) {
        println!(
            "{} p={} e={} {}: micro-F1 {} ({})",
            r.strategy,
            r.p,
            r.epsilon,
            r.algorithm,
            r.micro_f1.map_or("-".into(), |v| format!("{v:.4}")),
            r.status
        );
    }
    let failed = outcome.failures();
    if failed > 0 {
        eprintln!("{failed} cells failed");
        return Ok(3);
    }
    Ok(0)
}

pub fn analyze(a: AnalyzeArgs) -> Result<u8> {
    let ds = load_dataset(&a.data)?;
    let (train, test) = split_counts(&ds);
    println!("{} records ({train} train, {test} test), {} classes", ds.records.len(), ds.num_classes());
    if let Some(p) = &ds.provenance {
        println!("provenance: {} p={} epsilon={} seed={}", p.strategy, p.p, p.epsilon, p.seed);
    }
    let ambiguous = ds.records.iter().filter(|r| r.split == Split::Train && r.ambiguous).count();
    println!("ambiguous train records: {ambiguous}");
    print_audit(&ds)?;

    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for r in ds.records.iter().filter(|r| r.split == Split::Train) {
        *sizes.entry(r.candidate.len()).or_default() += 1;
    }
    println!("candidate-set sizes:");
    for (k, n) in &sizes {
        println!("  {k}: {n}");
    }
    let rates = class_flip_rates(&ds);
    if let Some(out) = &a.out {
        let counts = ds.train_candidate_counts();
        let rows: Vec<Vec<String>> = ds
            .label_space
            .class_names()
            .iter()
            .enumerate()
            .map(|(k, name)| vec![name.clone(), counts[k].to_string(), opt_cell(rates[k])])
            .collect();
        write_csv(&out.join("class_flip_rates.csv"), &header(&["class", "candidate_count", "flip_rate"]), &rows)?;
        let rows: Vec<Vec<String>> = sizes.iter().map(|(k, n)| vec![k.to_string(), n.to_string()]).collect();
        write_csv(&out.join("candidate_sizes.csv"), &header(&["size", "records"]), &rows)?;
    }
    Ok(0)
}

pub fn report(a: ReportArgs) -> Result<u8> {
    let files = write_report(&a.sweep, &a.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(0)
}

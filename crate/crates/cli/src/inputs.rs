use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pllforge_core::ambiguity::{build_treatment_matrix, Strategy};
use pllforge_core::data::PartialDataset;
use pllforge_core::harness::sweep::model_driven_matrix;
use pllforge_core::harness::{BackboneSpec, ExperimentConfig, MatrixInputs};
use pllforge_core::io::{read_features, read_instance_matrix, FEATURES};
use pllforge_core::model::BackboneVariant;
use pllforge_core::synth::TREATMENT_FILE;
use serde::Serialize;

use crate::commands::UsageError;
use crate::{ExperimentArgs, MatrixArgs};

pub fn print_config<T: Serialize>(what: &str, value: &T) {
    let text = toml::to_string(value).unwrap_or_else(|e| format!("# unprintable: {e}\n"));
    eprintln!("# resolved {what} configuration\n{text}");
}

pub fn read_toml<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

pub fn parse<T: std::str::FromStr<Err = pllforge_core::CoreError>>(s: &str) -> Result<T> {
    Ok(s.parse()?)
}

pub fn backbone(name: &str, embed_dim: usize) -> Result<BackboneSpec> {
    let variant = match name {
        "linear" => BackboneVariant::Linear,
        "mlp" => BackboneVariant::Mlp { hidden: vec![64] },
        "resnet" => BackboneVariant::default(),
        other => return Err(UsageError(format!("unknown backbone {other:?}")).into()),
    };
    Ok(BackboneSpec { variant, embed_dim })
}

/// Config file values overridden by any flags given.
pub fn experiment(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.dataset = Some(d.clone());
    }
    if let Some(s) = &a.algorithm {
        cfg.algorithm = parse(s)?;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        cfg.optimizer.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.optimizer.batch_size = b;
    }
    if let Some(e) = a.embed_dim {
        cfg.backbone.embed_dim = e;
    }
    if let Some(b) = &a.backbone {
        cfg.backbone = backbone(b, cfg.backbone.embed_dim)?;
    }
    Ok(cfg)
}

pub fn dataset_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.dataset
        .clone()
        .ok_or_else(|| UsageError("no dataset: pass --data or set dataset in the config".into()).into())
}

fn existing(flag: &Option<PathBuf>, fallback: PathBuf) -> Option<PathBuf> {
    flag.clone().or_else(|| fallback.exists().then_some(fallback))
}

/// Loads only the matrix inputs the given strategies need. Missing files
/// fall back to the dataset directory's feature table and treatment matrix.
pub fn matrix_inputs(
    strategies: &[Strategy],
    data_dir: &Path,
    clean: &PartialDataset,
    args: &MatrixArgs,
    exp: &ExperimentConfig,
    seed: u64,
) -> Result<MatrixInputs> {
    let mut out = MatrixInputs::default();
    let needs = |s: Strategy| strategies.contains(&s);
    if needs(Strategy::ClassCardiologist) || needs(Strategy::InstanceCardiologist) {
        let path = existing(&args.features, data_dir.join(FEATURES))
            .ok_or_else(|| UsageError("cardiologist strategies need --features".into()))?;
        out.features = Some(read_features(&path)?);
    }
    if needs(Strategy::Treatment) {
        let path = existing(&args.treatment, data_dir.join(TREATMENT_FILE))
            .ok_or_else(|| UsageError("treatment strategy needs --treatment".into()))?;
        let (m, warnings) = build_treatment_matrix(&path, &clean.label_space)?;
        for w in warnings {
            log::warn!("{}: {w}", path.display());
        }
        out.treatment = Some(m);
    }
    if needs(Strategy::ModelDriven) {
        out.model_driven = Some(match &args.model_matrix {
            Some(p) => read_instance_matrix(p, clean)?,
            None => {
                log::info!("training a clean baseline for the model-driven matrix");
                model_driven_matrix(clean, exp, seed)?
            }
        });
    }
    Ok(out)
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use crate::ambiguity::{GenerationConfig, Strategy};
use crate::data::PartialDataset;
use crate::error::{invalid, CoreError, Result};
use crate::model::{BackboneConfig, BackboneVariant};
use crate::pll::{Algorithm, AlgorithmConfig};

/// Backbone choice independent of the dataset's shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    #[serde(flatten)]
    pub variant: BackboneVariant,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_embed_dim() -> usize {
    32
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::default(),
            embed_dim: default_embed_dim(),
        }
    }
}

impl BackboneSpec {
    pub fn linear() -> Self {
        Self {
            variant: BackboneVariant::Linear,
            embed_dim: default_embed_dim(),
        }
    }

    pub fn resolve(&self, ds: &PartialDataset) -> BackboneConfig {
        BackboneConfig {
            variant: self.variant.clone(),
            leads: ds.leads,
            length: ds.length,
            embed_dim: self.embed_dim,
            num_classes: ds.num_classes(),
        }
    }
}

/// Candidate generation applied to a clean dataset before training. The
/// seed comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSpec {
    pub strategy: Strategy,
    pub p: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub r: Option<usize>,
    /// Matrix file for strategies that cannot derive one from the dataset.
    #[serde(default)]
    pub matrix: Option<PathBuf>,
}

impl GenerationSpec {
    pub fn config(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            strategy: self.strategy,
            p: self.p,
            epsilon: self.epsilon,
            r: self.r,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub strategies: Vec<Strategy>,
    pub p: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub r: Option<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Random],
            p: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            epsilon: vec![0.5],
            algorithms: vec![Algorithm::NoPll],
            r: None,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.p.is_empty() || self.epsilon.is_empty() || self.algorithms.is_empty() {
            return invalid("sweep grid must be nonempty in every axis");
        }
        for &p in &self.p {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("p = {p} outside [0, 1]"));
            }
        }
        for &e in &self.epsilon {
            if !(0.0..=1.0).contains(&e) {
                return invalid(format!("epsilon = {e} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerConfig,
    pub backbone: BackboneSpec,
    pub hyper: AlgorithmConfig,
    pub generation: Option<GenerationSpec>,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            algorithm: Algorithm::NoPll,
            seeds: vec![0, 1, 2],
            optimizer: OptimizerConfig::default(),
            backbone: BackboneSpec::default(),
            hyper: AlgorithmConfig::default(),
            generation: None,
            sweep: SweepGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CoreError::format(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        self.optimizer.validate()?;
        self.hyper.validate()?;
        if let Some(g) = &self.generation {
            g.config(0).validate()?;
        }
        Ok(())
    }
}

//! Backbones and the architecture fragments individual learners need.

mod backbone;
mod checkpoint;
mod decoupler;
mod ensemble;
mod graph;
mod layers;
mod momentum;
mod params;

pub use backbone::{Backbone, BackboneConfig, BackboneOutput, BackboneVariant};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST,
};
pub use decoupler::SemanticDecoupler;
pub use ensemble::{AttentionFuse, MultiHeadClassifier, NORM_EPS};
pub use graph::{build_cooccurrence_adjacency, cooccurrence, GatedGraphPropagator, PerClassClassifier};
pub use layers::{BatchNorm, Conv1d, Linear, BN_EPS};
pub use momentum::momentum_update;
pub use params::{init_uniform, Bind, BnUpdate, Param, ParamId, ParamStore, BN_MOMENTUM};

use pllforge_autodiff::{conv_out_len, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv1d, Linear};
use super::params::{Bind, ParamStore};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneVariant {
    Linear,
    Mlp { hidden: Vec<usize> },
    SmallResnet1d { blocks: usize, channels: usize },
}

impl Default for BackboneVariant {
    fn default() -> Self {
        BackboneVariant::SmallResnet1d {
            blocks: 4,
            channels: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub leads: usize,
    pub length: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return invalid("embedding dimension must be at least 1");
        }
        if self.leads == 0 || self.length == 0 {
            return invalid("input must have at least one lead and one sample");
        }
        if self.num_classes < 2 {
            return invalid("need at least 2 classes");
        }
        match &self.variant {
            BackboneVariant::SmallResnet1d { blocks, channels } => {
                if *blocks == 0 {
                    return invalid("residual backbone needs at least one block");
                }
                if *channels < 2 {
                    return invalid("residual backbone needs at least 2 channels");
                }
            }
            BackboneVariant::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return invalid("hidden layer sizes must be positive");
                }
            }
            BackboneVariant::Linear => {}
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.leads * self.length
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
    conv3: Conv1d,
    bn3: BatchNorm,
    shortcut: Option<(Conv1d, BatchNorm)>,
}

impl ResBlock {
    fn forward(&self, t: &mut Tape, bind: &mut Bind, x: Var) -> Result<Var> {
        let h = self.conv1.forward(t, bind, x)?;
        let h = self.bn1.forward(t, bind, h)?;
        let h = t.relu(h)?;
        let h = self.conv2.forward(t, bind, h)?;
        let h = self.bn2.forward(t, bind, h)?;
        let h = t.relu(h)?;
        let h = self.conv3.forward(t, bind, h)?;
        let h = self.bn3.forward(t, bind, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(t, bind, x)?;
                bn.forward(t, bind, s)?
            }
            None => x,
        };
        let sum = t.add(h, skip)?;
        Ok(t.relu(sum)?)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Flat,
    Mlp(Vec<Linear>),
    Res {
        stem: Conv1d,
        stem_bn: BatchNorm,
        blocks: Vec<ResBlock>,
    },
}

/// Feature extractor `φ(x) ∈ R^E` with an optional linear head to `C` logits.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    body: Body,
    embed: Linear,
    head: Option<Linear>,
}

pub struct BackboneOutput {
    pub embedding: Var,
    pub logits: Option<Var>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        with_head: bool,
        group: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (body, feat) = match &cfg.variant {
            BackboneVariant::Linear => (Body::Flat, cfg.input_width()),
            BackboneVariant::Mlp { hidden } => {
                let mut layers = Vec::new();
                let mut width = cfg.input_width();
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(Linear::new(store, &format!("{name}.mlp{i}"), width, h, group, rng));
                    width = h;
                }
                (Body::Mlp(layers), width)
            }
            &BackboneVariant::SmallResnet1d { blocks, channels } => {
                let stem = Conv1d::new(store, &format!("{name}.stem"), cfg.leads, channels, 3, 1, 1, group, rng);
                let stem_bn = BatchNorm::new(store, &format!("{name}.stem_bn"), channels, group);
                let mid = (channels / 2).max(1);
                let mut len = cfg.length;
                let mut list = Vec::with_capacity(blocks);
                for i in 0..blocks {
                    let stride = if i == 0 { 1 } else { 2 };
                    let p = format!("{name}.block{i}");
                    let shortcut = (stride != 1).then(|| {
                        (
                            Conv1d::new(store, &format!("{p}.down"), channels, channels, 1, stride, 0, group, rng),
                            BatchNorm::new(store, &format!("{p}.down_bn"), channels, group),
                        )
                    });
                    list.push(ResBlock {
                        conv1: Conv1d::new(store, &format!("{p}.conv1"), channels, mid, 1, 1, 0, group, rng),
                        bn1: BatchNorm::new(store, &format!("{p}.bn1"), mid, group),
                        conv2: Conv1d::new(store, &format!("{p}.conv2"), mid, mid, 3, stride, 1, group, rng),
                        bn2: BatchNorm::new(store, &format!("{p}.bn2"), mid, group),
                        conv3: Conv1d::new(store, &format!("{p}.conv3"), mid, channels, 1, 1, 0, group, rng),
                        bn3: BatchNorm::new(store, &format!("{p}.bn3"), channels, group),
                        shortcut,
                    });
                    len = conv_out_len(len, 3, stride, 1);
                }
                debug_assert!(len >= 1);
                (
                    Body::Res {
                        stem,
                        stem_bn,
                        blocks: list,
                    },
                    channels,
                )
            }
        };
        let embed = Linear::new(store, &format!("{name}.embed"), feat, cfg.embed_dim, group, rng);
        let head = with_head
            .then(|| Linear::new(store, &format!("{name}.head"), cfg.embed_dim, cfg.num_classes, group, rng));
        Ok(Self {
            cfg: cfg.clone(),
            body,
            embed,
            head,
        })
    }

    /// Spatial length after the residual stack.
    pub fn output_length(&self) -> usize {
        match &self.body {
            Body::Res { blocks, .. } => {
                (1..blocks.len()).fold(self.cfg.length, |l, _| conv_out_len(l, 3, 2, 1))
            }
            _ => 1,
        }
    }

    /// `x: [B, leads, length]` → embeddings `[B, E]` and logits `[B, C]`.
    pub fn forward(&self, t: &mut Tape, bind: &mut Bind, x: Var) -> Result<BackboneOutput> {
        let shape = t.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.leads || shape[2] != self.cfg.length {
            return invalid(format!(
                "backbone expects [B, {}, {}], got {shape:?}",
                self.cfg.leads, self.cfg.length
            ));
        }
        let b = shape[0];
        let feat = match &self.body {
            Body::Flat => t.reshape(x, &[b, self.cfg.input_width()])?,
            Body::Mlp(layers) => {
                let mut h = t.reshape(x, &[b, self.cfg.input_width()])?;
                for layer in layers {
                    h = layer.forward(t, bind, h)?;
                    h = t.relu(h)?;
                }
                h
            }
            Body::Res {
                stem,
                stem_bn,
                blocks,
            } => {
                let h = stem.forward(t, bind, x)?;
                let h = stem_bn.forward(t, bind, h)?;
                let mut h = t.relu(h)?;
                for block in blocks {
                    h = block.forward(t, bind, h)?;
                }
                t.mean_axis(h, 2)?
            }
        };
        let embedding = self.embed.forward(t, bind, feat)?;
        let logits = match &self.head {
            Some(head) => Some(head.forward(t, bind, embedding)?),
            None => None,
        };
        Ok(BackboneOutput { embedding, logits })
    }
}

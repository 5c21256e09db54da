//! Model variants, assembly, losses, training and checkpoints.

mod checkpoint;
mod model;
mod train;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{compute_loss, loss_grad_check, AttentionMaps, Graph, LossBreakdown, Model, Prediction, Targets};
pub use train::{evaluate, fit, gold_extraction, train_step, EpochLog, RecordOutcome, TrainOptions, TrainState};

use crate::autodiff::{LearningRates, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::data::{Record, Vocabulary};
use crate::par::{AttributeCatalog, Policy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    TextOnly,
    TextImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Image cells appended to the token rows before the text encoder.
    VanillaConcat,
    /// As `VanillaConcat` with one extra residual attention layer over the
    /// joint sequence in front of the encoder.
    ExtraSelfAttn,
    Tir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeMode {
    /// One tagger over `2C + 1` labels for every attribute.
    MaxRangeJoint,
    Par,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Pretrained-analog encoders are frozen.
    Fixed,
    Uls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelVariant {
    pub modality: Modality,
    pub fusion: Fusion,
    pub range: RangeMode,
    pub policy: Option<Policy>,
    pub scheme: Scheme,
}

/// Variant names in the order `ablate` runs and reports them.
pub const ABLATION_GRID: [&str; 9] =
    ["uls-l", "vanilla", "self-attn", "tir", "vanilla+par", "tir+par-proto", "tir+par-dynet", "tir+par-bert", "fixed"];

impl ModelVariant {
    pub fn validate(&self) -> Result<()> {
        if self.modality == Modality::TextOnly && self.fusion != Fusion::VanillaConcat {
            return Err(Error::Config(format!("text-only variants cannot use {:?} fusion: there is no image", self.fusion)));
        }
        match (self.range, self.policy) {
            (RangeMode::MaxRangeJoint, Some(p)) => {
                Err(Error::Config(format!("max-range-joint decoding takes no attribute policy (got {p:?})")))
            }
            (RangeMode::Par, None) => Err(Error::Config("par range decoding needs a policy".into())),
            _ => Ok(()),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        use Fusion::*;
        use Modality::*;
        use RangeMode::*;
        let v = |modality, fusion, range, policy, scheme| ModelVariant { modality, fusion, range, policy, scheme };
        let variant = match name {
            "uls-l" => v(TextOnly, VanillaConcat, MaxRangeJoint, None, Scheme::Uls),
            "vanilla" => v(TextImage, VanillaConcat, MaxRangeJoint, None, Scheme::Uls),
            "self-attn" => v(TextImage, ExtraSelfAttn, MaxRangeJoint, None, Scheme::Uls),
            "tir" => v(TextImage, Tir, MaxRangeJoint, None, Scheme::Uls),
            "vanilla+par" => v(TextImage, VanillaConcat, Par, Some(Policy::Prototype), Scheme::Uls),
            "tir+par-proto" | "full" => v(TextImage, Tir, Par, Some(Policy::Prototype), Scheme::Uls),
            "tir+par-dynet" => v(TextImage, Tir, Par, Some(Policy::Dynet), Scheme::Uls),
            "tir+par-bert" => v(TextImage, Tir, Par, Some(Policy::BertGuided), Scheme::Uls),
            "fixed" => v(TextImage, Tir, Par, Some(Policy::Prototype), Scheme::Fixed),
            other => {
                return Err(Error::Config(format!("unknown variant {other:?}; known: {}, full", ABLATION_GRID.join(", "))));
            }
        };
        Ok(variant)
    }
}

fn kebab<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", kebab(&self.modality), kebab(&self.fusion), kebab(&self.range))?;
        if let Some(p) = self.policy {
            write!(f, "/{}", kebab(&p))?;
        }
        write!(f, "/{}", kebab(&self.scheme))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub image_size: usize,
    pub conv_channels: (usize, usize),
    /// Internal width of the fusion attention.
    pub attention_dim: usize,
    /// Row softmax on the fusion attention map.
    pub normalize_attention: bool,
    /// Learned modality embedding added to every image cell.
    pub modality_embedding: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            dim: 64,
            layers: 2,
            heads: 4,
            hidden: 64,
            max_len: 64,
            image_size: 28,
            conv_channels: (16, 32),
            attention_dim: 64,
            normalize_attention: false,
            modality_embedding: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrPreset {
    /// 5e-5 for the visual encoder, 1e-4 elsewhere.
    Gentle,
    /// 1e-3 everywhere.
    Desk,
}

impl LrPreset {
    pub fn rates(self) -> LearningRates {
        match self {
            LrPreset::Gentle => LearningRates::gentle(),
            LrPreset::Desk => LearningRates::desk(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Single,
    Double,
}

/// Parameters frozen under `scheme`.
/// Vocabulary over the training tokens and every dictionary word. Tokens only
/// seen outside training map to the unknown id.
pub fn training_vocabulary(train: &[&Record], catalog: &AttributeCatalog) -> Vocabulary {
    let words = (0..catalog.len()).flat_map(|a| catalog.words(a).iter().map(String::as_str));
    Vocabulary::build(train.iter().flat_map(|r| r.tokens.iter().map(String::as_str)).chain(words))
}

pub fn freeze_mask(store: &ParamStore, scheme: Scheme) -> HashSet<ParamId> {
    match scheme {
        Scheme::Uls => HashSet::new(),
        Scheme::Fixed => store.iter().filter(|(_, p)| p.group.is_pretrained()).map(|(id, _)| id).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionBudget {
    pub attributes: usize,
    pub length: usize,
    pub selected: usize,
    /// Outputs of one joint tagger: `(2C + 1) · S`.
    pub t_o: usize,
    /// Range scores plus one B-I-O sequence per selected attribute: `C + 3 · S · C_m`.
    pub t_m: usize,
}

pub fn prediction_budget(attributes: usize, length: usize, selected: usize) -> Result<PredictionBudget> {
    if length == 0 || selected == 0 || selected > attributes {
        return Err(Error::contract(format!(
            "budget needs 1 <= C_m <= C and S >= 1 (C={attributes}, S={length}, C_m={selected})"
        )));
    }
    Ok(PredictionBudget {
        attributes,
        length,
        selected,
        t_o: (2 * attributes + 1) * length,
        t_m: attributes + 3 * length * selected,
    })
}

//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uls_dram::data::SyntheticSpec;
use uls_dram::pipeline::{LrPreset, ModelDims, ModelVariant, Precision, TrainOptions, ABLATION_GRID};

use crate::failure::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: String,
    /// Range score above which an attribute is decoded.
    pub threshold: f64,
    pub corpus: CorpusConfig,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
    pub attention: AttentionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub records: usize,
    /// Generation seed; the run seed when absent.
    pub seed: Option<u64>,
    /// JSONL corpus to read instead of generating one.
    pub path: Option<PathBuf>,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rates: LrPreset,
    pub lambda: f64,
    pub negatives: usize,
    pub unk_dropout: f64,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    /// Seeds each variant is trained with; the run seed when empty.
    pub seeds: Vec<u64>,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub records: usize,
    pub split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            variant: "full".into(),
            threshold: 0.5,
            corpus: CorpusConfig::default(),
            dims: ModelDims::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            sweep: SweepConfig::default(),
            attention: AttentionConfig::default(),
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { records: 2000, seed: None, path: None, spec: SyntheticSpec::default() }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rates: t.learning_rates,
            lambda: t.lambda,
            negatives: t.negatives,
            unk_dropout: t.unk_dropout,
            precision: t.precision,
        }
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { variants: ABLATION_GRID.iter().map(|s| s.to_string()).collect(), seeds: Vec::new(), split: "test".into() }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { thresholds: vec![0.3, 0.4, 0.5, 0.6], split: "test".into() }
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { records: 4, split: "test".into() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        ModelVariant::preset(&self.variant)?;
        for v in &self.ablation.variants {
            ModelVariant::preset(v)?;
        }
        uls_dram::par::check_threshold(self.threshold)?;
        if self.sweep.thresholds.is_empty() {
            return Err(Failure::Config("sweep.thresholds is empty".into()));
        }
        for &t in &self.sweep.thresholds {
            uls_dram::par::check_threshold(t)?;
        }
        if self.train.batch_size == 0 {
            return Err(Failure::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.unk_dropout) {
            return Err(Failure::Config("train.unk_dropout must lie in [0, 1)".into()));
        }
        if self.corpus.path.is_none() {
            self.corpus.spec.validate()?;
        }
        Ok(())
    }

    pub fn corpus_seed(&self) -> u64 {
        self.corpus.seed.unwrap_or(self.seed)
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rates: t.learning_rates,
            lambda: t.lambda,
            negatives: t.negatives,
            unk_dropout: t.unk_dropout,
            precision: t.precision,
            seed: self.seed,
        }
    }

    /// Hex SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::Internal(format!("cannot render config: {e}")))
    }
}

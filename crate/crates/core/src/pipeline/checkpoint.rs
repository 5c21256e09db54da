use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::train::TrainState;
use super::{ModelDims, ModelVariant};
use crate::autodiff::{AdamState, LearningRates, ParamGroup};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::par::AttributeCatalog;
use crate::tensor::Tensor;

/// First bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ULSDRAM1";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    epoch: usize,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    lr: LearningRates,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    rng: RngState,
    best_valid_f1: Option<f64>,
    variant: ModelVariant,
    dims: ModelDims,
    threshold: f64,
    catalog: AttributeCatalog,
    vocabulary: Vec<String>,
    params: Vec<ParamEntry>,
    optimizer: OptimizerHeader,
}

/// Layout: magic, `u64` little-endian header length, JSON header, then the
/// parameter values followed by both Adam moment buffers, each as
/// little-endian `f64` in header order.
pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    let header = Header {
        config_hash: state.config_hash.clone(),
        rng: RngState { seed: state.seed, epoch: state.epoch, step: state.step },
        best_valid_f1: state.best_valid_f1,
        variant: model.variant,
        dims: model.dims.clone(),
        threshold: model.threshold,
        catalog: model.catalog.clone(),
        vocabulary: model.vocab.tokens().to_vec(),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), group: p.group, shape: p.value.shape().to_vec() })
            .collect(),
        optimizer: OptimizerHeader {
            step: state.adam.step,
            beta1: state.adam.beta1,
            beta2: state.adam.beta2,
            epsilon: state.adam.epsilon,
            lr: state.adam.lr,
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 24 * model.store.scalar_count());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        bytes.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    for buf in state.adam.m.iter().chain(&state.adam.v) {
        bytes.extend(buf.iter().flat_map(|v| v.to_le_bytes()));
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainState)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let vocab = Vocabulary::from_tokens(header.vocabulary);
    let mut model = Model::new(header.variant, header.dims, header.catalog, vocab, header.threshold, header.rng.seed)?;
    if model.store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, the model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.iter().zip(&header.params) {
        let p = model.store.get_mut(*id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter {} {:?} does not match {} {:?}", entry.name, entry.shape, p.name, p.value.shape())));
        }
        let n = p.value.len();
        p.value = Tensor::new(entry.shape.clone(), r.floats(n)?)?;
    }
    let sizes: Vec<usize> = header.params.iter().map(|e| e.shape.iter().product()).collect();
    let m = sizes.iter().map(|&n| r.floats(n)).collect::<Result<Vec<_>>>()?;
    let v = sizes.iter().map(|&n| r.floats(n)).collect::<Result<Vec<_>>>()?;
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let o = header.optimizer;
    let adam = AdamState { step: o.step, beta1: o.beta1, beta2: o.beta2, epsilon: o.epsilon, lr: o.lr, m, v };
    let state = TrainState {
        epoch: header.rng.epoch,
        step: header.rng.step,
        seed: header.rng.seed,
        adam,
        best_valid_f1: header.best_valid_f1,
        config_hash: header.config_hash,
    };
    Ok((model, state))
}

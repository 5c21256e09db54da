use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{compute_loss, LossBreakdown, Model, Prediction, Targets};
use super::{freeze_mask, LrPreset, Precision};
use crate::autodiff::{AdamState, Gradients, ParamId, Tape};
use crate::crf::TagSchema;
use crate::data::{EncodedRecord, Record, UNK};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{extract_pairs, Extraction, MetricsAccumulator, MetricsReport, Provenance, SpanPrediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rates: LrPreset,
    /// Weight of the range loss.
    pub lambda: f64,
    /// Absent attributes decoded per record with an all-`O` target.
    pub negatives: usize,
    /// Chance of replacing each training token with the unknown id.
    pub unk_dropout: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 16,
            learning_rates: LrPreset::Desk,
            lambda: 1.0,
            negatives: 1,
            unk_dropout: 0.05,
            precision: Precision::Double,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub adam: AdamState,
    pub best_valid_f1: Option<f64>,
    pub config_hash: String,
}

impl TrainState {
    pub fn new(model: &Model, options: &TrainOptions, config_hash: impl Into<String>) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            seed: options.seed,
            adam: AdamState::new(&model.store, options.learning_rates.rates()),
            best_valid_f1: None,
            config_hash: config_hash.into(),
        }
    }
}

fn record_rng(seed: u64, epoch: usize, key: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | key as u64);
    rng
}

fn record_gradients(
    model: &Model,
    frozen: &HashSet<ParamId>,
    record: &EncodedRecord,
    mut rng: ChaCha8Rng,
    options: &TrainOptions,
) -> Result<(Gradients, LossBreakdown)> {
    let ids: Vec<usize> =
        record.ids.iter().map(|&id| if rng.gen_bool(options.unk_dropout) { UNK } else { id }).collect();
    let targets = if model.variant.range == super::RangeMode::Par {
        let mut attrs: Vec<usize> = (0..record.range.len()).filter(|&a| record.range[a] > 0.5).collect();
        let absent: Vec<usize> = (0..record.range.len()).filter(|&a| record.range[a] <= 0.5).collect();
        attrs.extend(absent.choose_multiple(&mut rng, options.negatives.min(absent.len())));
        attrs.sort_unstable();
        Targets::Attributes(attrs)
    } else {
        Targets::Predicted
    };
    let mut tape = Tape::with_frozen(&model.store, frozen);
    let graph = model.forward(&mut tape, &ids, &record.image, &targets)?;
    let (loss, breakdown) = compute_loss(&mut tape, &graph, record, options.lambda)?;
    Ok((tape.backward(loss)?, breakdown))
}

/// One optimizer update over `batch`, given as `(key, record)` pairs where the
/// key seeds that record's dropout and negative sampling.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    batch: &[(usize, &EncodedRecord)],
    options: &TrainOptions,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let frozen = freeze_mask(&model.store, model.variant.scheme);
    let step = state.step;
    let results = {
        let m: &Model = model;
        exec::map_indexed(batch.len(), |i| {
            let (key, record) = batch[i];
            record_gradients(m, &frozen, record, record_rng(state.seed, state.epoch, key), options)
        })
    };
    let mut total = Gradients::default();
    let mut mean = LossBreakdown::default();
    for (i, r) in results.into_iter().enumerate() {
        let (g, l) = r.map_err(|e| match e {
            e if e.is_numeric() => Error::Diverged { step, detail: format!("record {} of the batch: {e}", batch[i].0) },
            e => e,
        })?;
        total.accumulate(&g);
        mean.crf_nll += l.crf_nll;
        mean.bce += l.bce;
        mean.total += l.total;
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    mean.crf_nll *= scale;
    mean.bce *= scale;
    mean.total *= scale;
    model.store.set_grads(total);
    state.adam.step(&mut model.store, &frozen)?;
    if options.precision == Precision::Single {
        model.store.round_to_single();
    }
    if let Some((_, p)) = model.store.iter().find(|(_, p)| !p.value.is_finite()) {
        return Err(Error::Diverged { step, detail: format!("parameter {} is no longer finite", p.name) });
    }
    state.step += 1;
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub crf_nll: f64,
    pub bce: f64,
    pub total: f64,
    pub valid_tag_f1: Option<f64>,
    pub valid_cls_f1: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,step,crf_nll,bce,total,valid_tag_f1,valid_cls_f1";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        format!(
            "{},{},{:.8},{:.8},{:.8},{},{}",
            self.epoch,
            self.step,
            self.crf_nll,
            self.bce,
            self.total,
            opt(self.valid_tag_f1),
            opt(self.valid_cls_f1)
        )
    }
}

/// Trains from `state.epoch` up to `options.epochs`, evaluating on `valid`
/// after every epoch when it is nonempty.
pub fn fit(
    model: &mut Model,
    state: &mut TrainState,
    train: &[EncodedRecord],
    valid: &[&Record],
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog, &Model, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if options.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut logs = Vec::new();
    while state.epoch < options.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut record_rng(state.seed, state.epoch, u32::MAX as usize));
        let mut sums = LossBreakdown::default();
        let mut batches = 0;
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<(usize, &EncodedRecord)> = chunk.iter().map(|&i| (i, &train[i])).collect();
            let l = train_step(model, state, &batch, options)?;
            sums.crf_nll += l.crf_nll;
            sums.bce += l.bce;
            sums.total += l.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let (tag, cls) = if valid.is_empty() {
            (None, None)
        } else {
            let (report, _) = evaluate(model, valid, Provenance::default())?;
            (Some(report.tag_f1), Some(report.cls_f1))
        };
        if let Some(f) = tag {
            if state.best_valid_f1.is_none_or(|b| f > b) {
                state.best_valid_f1 = Some(f);
            }
        }
        state.epoch += 1;
        let log = EpochLog {
            epoch: state.epoch,
            step: state.step,
            crf_nll: sums.crf_nll / n,
            bce: sums.bce / n,
            total: sums.total / n,
            valid_tag_f1: tag,
            valid_cls_f1: cls,
        };
        log::info!("epoch {} loss {:.4} valid tag-f1 {:?}", log.epoch, log.total, log.valid_tag_f1);
        on_epoch(&log, model, state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// What the model produced for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordOutcome {
    pub id: String,
    pub prediction: Prediction,
    pub extraction: Extraction,
    pub predicted_range: Vec<bool>,
}

pub fn gold_extraction(model: &Model, record: &Record) -> Result<Extraction> {
    let mut out = Extraction::default();
    for s in &record.spans {
        let a = model
            .catalog
            .index(&s.attribute)
            .ok_or_else(|| Error::Catalog(format!("record {} uses unknown attribute {}", record.id, s.attribute)))?;
        let surface = record.surface(s);
        out.pairs.entry(a).or_default().insert(surface.clone());
        out.spans.push(SpanPrediction { attribute: a, start: s.start, end: s.end, surface });
    }
    out.spans.sort();
    Ok(out)
}

pub fn evaluate(model: &Model, records: &[&Record], provenance: Provenance) -> Result<(MetricsReport, Vec<RecordOutcome>)> {
    let schema = model.decoder().schema();
    let c = model.catalog.len();
    let outcomes = exec::map_indexed(records.len(), |i| -> Result<(RecordOutcome, Extraction, Vec<bool>)> {
        let record = records[i];
        let encoded = model.encode_record(record)?;
        let prediction = model.predict(&encoded)?;
        let extraction = extract_pairs(&prediction.sequences, schema, &record.tokens);
        let predicted_range = match schema {
            TagSchema::PerAttribute => (0..c).map(|a| prediction.selected.contains(&a)).collect(),
            TagSchema::Joint { .. } => (0..c).map(|a| extraction.pairs.contains_key(&a)).collect(),
        };
        let gold = gold_extraction(model, record)?;
        let gold_range = encoded.range.iter().map(|&v| v > 0.5).collect();
        Ok((RecordOutcome { id: record.id.clone(), prediction, extraction, predicted_range }, gold, gold_range))
    });
    let mut acc = MetricsAccumulator::new();
    let mut out = Vec::with_capacity(records.len());
    for r in outcomes {
        let (outcome, gold, gold_range) = r?;
        acc.add(&outcome.extraction, &gold, &outcome.predicted_range, &gold_range);
        out.push(outcome);
    }
    Ok((acc.report(model.catalog.names(), provenance), out))
}

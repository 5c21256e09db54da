//! Tag sequences to attribute-value pairs, and the scores computed from them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crf::{TagSchema, TagSequence, B, I, O};
use crate::error::{Error, Result};

/// A predicted or gold value occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub attribute: usize,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

/// Attribute index to its set of value strings.
pub type PairSet = BTreeMap<usize, BTreeSet<String>>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Extraction {
    pub spans: Vec<SpanPrediction>,
    pub pairs: PairSet,
    /// `I` labels that had no open span of their attribute and were read as `B`.
    pub repairs: usize,
}

/// `(attribute, is_begin)` for a non-`O` label.
fn decode_label(schema: TagSchema, label: usize, attribute: Option<usize>) -> Option<(usize, bool)> {
    match schema {
        TagSchema::PerAttribute => match label {
            O => None,
            B => attribute.map(|a| (a, true)),
            I => attribute.map(|a| (a, false)),
            _ => None,
        },
        TagSchema::Joint { .. } => {
            if label == O {
                None
            } else {
                Some(((label - 1) / 2, label % 2 == 1))
            }
        }
    }
}

/// Reads spans off tag sequences. A span opens at `B` and runs through the
/// following `I` labels of the same attribute; a stray `I` opens a span as if
/// it were `B`. Equal surface strings of one attribute merge into one value.
pub fn extract_pairs<S: AsRef<str>>(sequences: &[TagSequence], schema: TagSchema, tokens: &[S]) -> Extraction {
    let mut out = Extraction::default();
    for seq in sequences {
        let n = seq.labels.len().min(tokens.len());
        let mut open: Option<(usize, usize)> = None;
        let close = |open: &mut Option<(usize, usize)>, end: usize, out: &mut Extraction| {
            if let Some((a, s)) = open.take() {
                let surface = tokens[s..=end].iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" ");
                out.pairs.entry(a).or_default().insert(surface.clone());
                out.spans.push(SpanPrediction { attribute: a, start: s, end, surface });
            }
        };
        for j in 0..n {
            match decode_label(schema, seq.labels[j], seq.attribute) {
                None => {
                    if j > 0 {
                        close(&mut open, j - 1, &mut out);
                    }
                }
                Some((a, begin)) => {
                    let continues = !begin && matches!(open, Some((oa, _)) if oa == a);
                    if !continues {
                        if j > 0 {
                            close(&mut open, j - 1, &mut out);
                        }
                        if !begin {
                            out.repairs += 1;
                        }
                        open = Some((a, j));
                    }
                }
            }
        }
        if n > 0 {
            close(&mut open, n - 1, &mut out);
        }
    }
    out.spans.sort();
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1 }
    }
}

/// Exact-match span counts for one record; each gold span matches at most once.
pub fn span_counts(pred: &[SpanPrediction], gold: &[SpanPrediction]) -> Counts {
    let key = |s: &SpanPrediction| (s.attribute, s.start, s.end);
    let mut unmatched: Vec<(usize, usize, usize)> = gold.iter().map(key).collect();
    let mut tp = 0;
    for p in pred {
        if let Some(i) = unmatched.iter().position(|g| *g == key(p)) {
            unmatched.swap_remove(i);
            tp += 1;
        }
    }
    Counts { tp, fp: pred.len() - tp, fn_: unmatched.len() }
}

pub fn tag_f1(pred: &[SpanPrediction], gold: &[SpanPrediction]) -> Prf {
    span_counts(pred, gold).prf()
}

/// Micro F1 over `(record, attribute)` membership decisions.
pub fn cls_counts(pred: &[bool], gold: &[bool]) -> Counts {
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

pub fn cls_f1(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> f64 {
    let mut c = Counts::default();
    for (p, g) in pred.iter().zip(gold) {
        c.add(cls_counts(p, g));
    }
    c.prf().f1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// `(correct, total)` over the annotated attributes of one record. A pair is
/// correct when the predicted value set equals the annotated one exactly;
/// attributes that are predicted but not annotated are ignored.
pub fn pair_counts(pred: &PairSet, gold: &PairSet) -> (usize, usize) {
    let correct = gold.iter().filter(|(a, values)| pred.get(a) == Some(values)).count();
    (correct, gold.len())
}

pub fn pair_accuracy(pred: &[PairSet], gold: &[PairSet]) -> Result<Accuracy> {
    let (mut correct, mut total) = (0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (c, t) = pair_counts(p, g);
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(Error::Undefined("accuracy over zero annotated pairs".into()));
    }
    Ok(Accuracy { correct, total, accuracy: correct as f64 / total as f64 })
}

/// Accumulates per-record results into a [`MetricsReport`].
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    spans: Counts,
    cls: Counts,
    correct: usize,
    total: usize,
    per_attribute: BTreeMap<usize, Counts>,
    repairs: usize,
    records: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &Extraction, gold: &Extraction, pred_range: &[bool], gold_range: &[bool]) {
        self.spans.add(span_counts(&pred.spans, &gold.spans));
        self.cls.add(cls_counts(pred_range, gold_range));
        let (c, t) = pair_counts(&pred.pairs, &gold.pairs);
        self.correct += c;
        self.total += t;
        let attributes: BTreeSet<usize> = pred.spans.iter().chain(&gold.spans).map(|s| s.attribute).collect();
        for a in attributes {
            let p: Vec<_> = pred.spans.iter().filter(|s| s.attribute == a).cloned().collect();
            let g: Vec<_> = gold.spans.iter().filter(|s| s.attribute == a).cloned().collect();
            self.per_attribute.entry(a).or_default().add(span_counts(&p, &g));
        }
        self.repairs += pred.repairs;
        self.records += 1;
    }

    pub fn report(&self, attribute_names: &[String], provenance: Provenance) -> MetricsReport {
        let prf = self.spans.prf();
        MetricsReport {
            precision: prf.precision,
            recall: prf.recall,
            tag_f1: prf.f1,
            cls_f1: self.cls.prf().f1,
            accuracy: if self.total == 0 { None } else { Some(self.correct as f64 / self.total as f64) },
            v_correct: self.correct,
            v_total: self.total,
            records: self.records,
            repairs: self.repairs,
            per_attribute: self
                .per_attribute
                .iter()
                .map(|(&a, c)| (attribute_names.get(a).cloned().unwrap_or_else(|| a.to_string()), c.prf()))
                .collect(),
            provenance,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub tag_f1: f64,
    pub cls_f1: f64,
    /// `None` when no pair was annotated.
    pub accuracy: Option<f64>,
    pub v_correct: usize,
    pub v_total: usize,
    pub records: usize,
    pub repairs: usize,
    pub per_attribute: BTreeMap<String, Prf>,
    #[serde(flatten)]
    pub provenance: Provenance,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "variant,split,seed,config_hash,precision,recall,tag_f1,cls_f1,accuracy,v_correct,v_total,records,repairs";

    pub fn csv_row(&self) -> String {
        let p = &self.provenance;
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
            p.variant,
            p.split,
            p.seed,
            p.config_hash,
            self.precision,
            self.recall,
            self.tag_f1,
            self.cls_f1,
            self.accuracy.map_or_else(String::new, |a| format!("{a:.6}")),
            self.v_correct,
            self.v_total,
            self.records,
            self.repairs
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

//! Attribute range prediction and prototype guidance.
//!
//! A sigmoid head over the pooled encoder feature scores every catalog
//! attribute; attributes scoring strictly above the threshold form the
//! predicted range, and each one is then decoded separately with its own
//! representation steering the decoder.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCatalog {
    names: Vec<String>,
    /// Words describing each attribute, used by the encoder-guided policy.
    dictionary: Vec<Vec<String>>,
}

impl AttributeCatalog {
    pub fn new(names: Vec<String>, dictionary: Vec<Vec<String>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Catalog("catalog has no attributes".into()));
        }
        if dictionary.len() != names.len() {
            return Err(Error::Catalog(format!("{} names but {} dictionary entries", names.len(), dictionary.len())));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Catalog(format!("duplicate attribute {n}")));
            }
        }
        Ok(AttributeCatalog { names, dictionary })
    }

    /// Catalog whose dictionary is each attribute's lower-cased name.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        let dictionary = names.iter().map(|n| vec![n.to_lowercase()]).collect();
        Self::new(names, dictionary)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn words(&self, index: usize) -> &[String] {
        &self.dictionary[index]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangePrediction {
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
}

impl RangePrediction {
    /// Keeps attributes whose score is strictly greater than `threshold`.
    pub fn from_scores(scores: Vec<f64>, threshold: f64) -> Self {
        let selected = scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, _)| i).collect();
        RangePrediction { scores, selected }
    }
}

#[derive(Clone, Debug)]
pub struct RangeHead {
    pub w_cls: ParamId,
    pub threshold: f64,
}

pub fn check_threshold(threshold: f64) -> Result<f64> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(threshold)
    } else {
        Err(Error::Config(format!("range threshold {threshold} must lie strictly between 0 and 1")))
    }
}

impl RangeHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        attributes: usize,
        threshold: f64,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let threshold = check_threshold(threshold)?;
        let w_cls = store.add_uniform(name, ParamGroup::TaskSpecific, dim, attributes, bound, rng)?;
        Ok(RangeHead { w_cls, threshold })
    }

    /// Pre-sigmoid scores `(1, C)` for a pooled `(1, D)` feature.
    pub fn logits(&self, tape: &mut Tape<'_>, pooled: Var) -> Result<Var> {
        let w = tape.param(self.w_cls);
        tape.matmul(pooled, w)
    }

    pub fn predict(&self, tape: &mut Tape<'_>, pooled: Var) -> Result<RangePrediction> {
        let logits = self.logits(tape, pooled)?;
        let scores = tape.value(logits).data().iter().map(|&z| crate::autodiff::kernels::sigmoid(z)).collect();
        Ok(RangePrediction::from_scores(scores, self.threshold))
    }
}

/// One learned embedding per attribute.
#[derive(Clone, Debug)]
pub struct PrototypeTable {
    pub table: ParamId,
    pub attributes: usize,
}

impl PrototypeTable {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, attributes: usize, dim: usize, bound: f64, rng: &mut R) -> Result<Self> {
        let table = store.add_uniform(name, ParamGroup::TaskSpecific, attributes, dim, bound, rng)?;
        Ok(PrototypeTable { table, attributes })
    }

    pub fn row(&self, tape: &mut Tape<'_>, attribute: usize) -> Result<Var> {
        if attribute >= self.attributes {
            return Err(Error::Catalog(format!("attribute {attribute} outside {} prototypes", self.attributes)));
        }
        let p = tape.param(self.table);
        tape.row_slice(p, attribute, attribute + 1)
    }

    /// The selected prototype rows in catalog order, or `None` for an empty range.
    pub fn select(&self, tape: &mut Tape<'_>, prediction: &RangePrediction) -> Result<Option<Var>> {
        if prediction.selected.is_empty() {
            return Ok(None);
        }
        let mut rows: Vec<usize> = prediction.selected.clone();
        rows.sort_unstable();
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.attributes) {
            return Err(Error::Catalog(format!("attribute {bad} outside {} prototypes", self.attributes)));
        }
        let p = tape.param(self.table);
        let index: Vec<_> = rows.into_iter().map(|r| (0, r)).collect();
        tape.gather_rows(&[p], &index).map(Some)
    }
}

/// Per-attribute tag projections `(2H, 3)` plus bias, used instead of guidance.
#[derive(Clone, Debug)]
pub struct DynetBank {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl DynetBank {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        attributes: usize,
        features: usize,
        labels: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::TaskSpecific;
        let mut weights = Vec::with_capacity(attributes);
        let mut biases = Vec::with_capacity(attributes);
        for a in 0..attributes {
            weights.push(store.add_uniform(format!("{prefix}.{a}.weight"), g, features, labels, bound, rng)?);
            biases.push(store.add_filled(format!("{prefix}.{a}.bias"), g, 1, labels, 0.0)?);
        }
        Ok(DynetBank { weights, biases })
    }

    pub fn apply(&self, attribute: usize) -> Result<(ParamId, ParamId)> {
        match (self.weights.get(attribute), self.biases.get(attribute)) {
            (Some(&w), Some(&b)) => Ok((w, b)),
            _ => Err(Error::Catalog(format!("attribute {attribute} outside a bank of {}", self.weights.len()))),
        }
    }

    /// Tag scores `(S, 3)` for decoder features `(S, 2H)`.
    pub fn scores(&self, tape: &mut Tape<'_>, features: Var, attribute: usize) -> Result<Var> {
        let (w, b) = self.apply(attribute)?;
        let (w, b) = (tape.param(w), tape.param(b));
        let z = tape.matmul(features, w)?;
        tape.add_row(z, b)
    }
}

/// `[f_j | cos(proto, f_j) · f_j]` for every row `j`.
pub fn guide(tape: &mut Tape<'_>, features: Var, proto: Var) -> Result<Var> {
    let cos = tape.cosine_rows(features, proto)?;
    let scaled = tape.scale_rows(features, cos)?;
    tape.concat_cols(&[features, scaled])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Prototype,
    Dynet,
    BertGuided,
}

impl Policy {
    pub fn uses_guidance(self) -> bool {
        !matches!(self, Policy::Dynet)
    }
}

/// Encodes a token-id sequence with the shared text encoder. The output has a
/// leading classification row followed by one row per id.
pub trait TextEncoder {
    fn encode_ids(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var>;
}

pub enum Representation<'a> {
    Prototype(&'a PrototypeTable),
    /// Dictionary words per attribute, already mapped to token ids.
    BertGuided { encoder: &'a dyn TextEncoder, dictionary: &'a [Vec<usize>] },
}

/// The `(1, D)` vector that guides decoding of `attribute`.
pub fn attribute_representation(tape: &mut Tape<'_>, source: &Representation<'_>, attribute: usize) -> Result<Var> {
    match source {
        Representation::Prototype(table) => table.row(tape, attribute),
        Representation::BertGuided { encoder, dictionary } => {
            let words = dictionary
                .get(attribute)
                .ok_or_else(|| Error::Catalog(format!("attribute {attribute} has no dictionary entry")))?;
            if words.is_empty() {
                return Err(Error::Config(format!("attribute {attribute} has an empty dictionary")));
            }
            let encoded = encoder.encode_ids(tape, words)?;
            let body = tape.row_slice(encoded, 1, words.len() + 1)?;
            tape.mean_rows(body)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const R2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn guided(f: &[f64], p: &[f64]) -> Vec<f64> {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let fv = tape.constant(Tensor::from_rows(1, f.len(), f.to_vec()).unwrap()).unwrap();
        let pv = tape.constant(Tensor::row(p)).unwrap();
        let g = guide(&mut tape, fv, pv).unwrap();
        tape.value(g).data().to_vec()
    }

    #[test]
    fn guidance_examples() {
        assert_eq!(guided(&[1.0, 0.0], &[1.0, 0.0]), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(guided(&[1.0, 0.0], &[0.0, 1.0]), vec![1.0, 0.0, 0.0, 0.0]);
        let g = guided(&[1.0, 1.0], &[1.0, 0.0]);
        for (a, b) in g.iter().zip([1.0, 1.0, R2, R2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(guided(&[0.0, 0.0], &[1.0, 0.0]), vec![0.0; 4]);
        assert_eq!(guided(&[2.0, 1.0], &[0.0, 0.0]), vec![2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_head_scores_half_and_selects_nothing() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = RangeHead::new(&mut store, "range", 4, 3, 0.5, 0.5, &mut rng).unwrap();
        store.get_mut(head.w_cls).value.data_mut().fill(0.0);
        let mut tape = Tape::new(&store);
        let pooled = tape.constant(Tensor::row(&[0.3, -1.0, 2.0, 0.1])).unwrap();
        let pred = head.predict(&mut tape, pooled).unwrap();
        assert_eq!(pred.scores, vec![0.5; 3]);
        assert!(pred.selected.is_empty());
    }

    #[test]
    fn threshold_selection() {
        assert_eq!(RangePrediction::from_scores(vec![0.9, 0.4, 0.6], 0.5).selected, vec![0, 2]);
        let scores = vec![0.45, 0.7, 0.2];
        assert_eq!(RangePrediction::from_scores(scores.clone(), 0.5).selected, vec![1]);
        assert_eq!(RangePrediction::from_scores(scores, 0.4).selected, vec![0, 1]);
        assert!(check_threshold(0.0).is_err());
        assert!(check_threshold(1.0).is_err());
    }

    #[test]
    fn prototype_selection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = PrototypeTable::new(&mut store, "proto", 4, 3, 0.5, &mut rng).unwrap();
        let full = store.value(table.table).clone();
        let mut tape = Tape::new(&store);
        let none = RangePrediction { scores: vec![0.0; 4], selected: vec![] };
        assert!(table.select(&mut tape, &none).unwrap().is_none());
        let all = RangePrediction { scores: vec![1.0; 4], selected: vec![0, 1, 2, 3] };
        let v = table.select(&mut tape, &all).unwrap().unwrap();
        assert_eq!(tape.value(v), &full);
        let one = RangePrediction { scores: vec![0.0, 0.0, 1.0, 0.0], selected: vec![2] };
        let v = table.select(&mut tape, &one).unwrap().unwrap();
        assert_eq!(tape.value(v).data(), full.row_slice(2));
        let r = attribute_representation(&mut tape, &Representation::Prototype(&table), 1).unwrap();
        assert_eq!(tape.value(r).data(), full.row_slice(1));
    }

    #[test]
    fn dynet_rows_are_independent() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = DynetBank::new(&mut store, "dynet", 3, 4, 3, 0.5, &mut rng).unwrap();
        store.get_mut(bank.weights[1]).value.data_mut().fill(0.0);
        let f = Tensor::from_rows(2, 4, vec![0.5, -1.0, 0.25, 2.0, 1.0, 1.0, -0.5, 0.0]).unwrap();
        let mut tape = Tape::new(&store);
        let fv = tape.constant(f).unwrap();
        let s0 = bank.scores(&mut tape, fv, 0).unwrap();
        let s1 = bank.scores(&mut tape, fv, 1).unwrap();
        let s2 = bank.scores(&mut tape, fv, 2).unwrap();
        assert!(tape.value(s1).data().iter().all(|&v| v == 0.0));
        assert_ne!(tape.value(s0).data(), tape.value(s2).data());
        assert_eq!(bank.apply(2).unwrap(), (bank.weights[2], bank.biases[2]));
        assert!(matches!(bank.apply(3), Err(Error::Catalog(_))));
    }

    struct Echo;

    impl TextEncoder for Echo {
        fn encode_ids(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
            let mut data = vec![9.0, 9.0];
            for &i in ids {
                data.extend([i as f64, 1.0]);
            }
            tape.constant(Tensor::from_rows(ids.len() + 1, 2, data)?)
        }
    }

    #[test]
    fn encoder_guided_representation_pools_word_rows() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let dictionary = vec![vec![4], vec![2, 6], vec![]];
        let source = Representation::BertGuided { encoder: &Echo, dictionary: &dictionary };
        let single = attribute_representation(&mut tape, &source, 0).unwrap();
        assert_eq!(tape.value(single).data(), &[4.0, 1.0]);
        let pair = attribute_representation(&mut tape, &source, 1).unwrap();
        assert_eq!(tape.value(pair).data(), &[4.0, 1.0]);
        assert!(matches!(attribute_representation(&mut tape, &source, 2), Err(Error::Config(_))));
    }

    #[test]
    fn catalog_rejects_duplicates() {
        assert!(AttributeCatalog::from_names(&["Color", "Type"]).is_ok());
        assert!(matches!(AttributeCatalog::from_names(&["Color", "Color"]), Err(Error::Catalog(_))));
        let c = AttributeCatalog::from_names(&["Color", "Type"]).unwrap();
        assert_eq!(c.index("Type"), Some(1));
        assert_eq!(c.words(0), &["color".to_string()]);
    }
}

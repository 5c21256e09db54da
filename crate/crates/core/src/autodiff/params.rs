use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer/freeze bucket a parameter belongs to.
///
/// The two `Pretrained*` groups stand in for the upstream single-modal
/// encoders; everything introduced for the downstream task is `TaskSpecific`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    PretrainedText,
    PretrainedVisual,
    TaskSpecific,
}

impl ParamGroup {
    pub fn is_pretrained(self) -> bool {
        !matches!(self, ParamGroup::TaskSpecific)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Owns every trainable tensor of a model, addressed by [`ParamId`] or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, group, value, grad: None });
        Ok(id)
    }

    /// Adds a `(rows, cols)` parameter drawn from `uniform(-bound, bound)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        self.add(name, group, Tensor::from_rows(rows, cols, data)?)
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> Result<ParamId> {
        self.add(name, group, Tensor::filled(rows, cols, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Installs accumulated gradients; parameters without one get zeros.
    pub fn set_grads(&mut self, grads: Gradients) {
        let mut grads = grads.grads;
        grads.resize(self.params.len(), None);
        for (p, g) in self.params.iter_mut().zip(grads) {
            let shape = p.value.shape().to_vec();
            p.grad = Some(g.unwrap_or_else(|| {
                Tensor::new(shape.clone(), vec![0.0; p.value.len()]).expect("shape from value")
            }));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_single(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn accumulate_slice(&mut self, id: ParamId, shape: &[usize], values: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(values) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), values.to_vec()).expect("grad shape"));
            }
        }
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_slice(ParamId(i), g.shape(), g.data());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

//! BiLSTM + CRF feature decoder.
//!
//! Three layouts share this type. `Guided` concatenates each token feature with
//! its cosine-scaled copy for the attribute being decoded and tags with one
//! B-I-O head. `Dynet` runs the BiLSTM once on the raw features and swaps in
//! an attribute-specific tag projection. `Joint` tags every attribute at once
//! over the `2C + 1` label alphabet.

use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::crf::{self, TagSchema, TagSequence};
use crate::encoders::BiLstm;
use crate::error::{Error, Result};
use crate::par::DynetBank;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderLayout {
    Guided,
    Dynet,
    Joint { attributes: usize },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layout: DecoderLayout,
    pub lstm: BiLstm,
    /// Shared tag projection; absent under `Dynet`.
    pub emission: Option<(ParamId, ParamId)>,
    pub dynet: Option<DynetBank>,
    pub transitions: ParamId,
    pub feature_dim: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        layout: DecoderLayout,
        feature_dim: usize,
        hidden: usize,
        attributes: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::TaskSpecific;
        let input = match layout {
            DecoderLayout::Guided => 2 * feature_dim,
            _ => feature_dim,
        };
        let lstm = BiLstm::new(store, &format!("{prefix}.lstm"), input, hidden, bound, rng)?;
        let labels = Self::schema_for(layout).labels();
        let (emission, dynet) = match layout {
            DecoderLayout::Dynet => {
                let bank = DynetBank::new(store, &format!("{prefix}.dynet"), attributes, 2 * hidden, labels, bound, rng)?;
                (None, Some(bank))
            }
            _ => (
                Some((
                    store.add_uniform(format!("{prefix}.emission.weight"), g, 2 * hidden, labels, bound, rng)?,
                    store.add_filled(format!("{prefix}.emission.bias"), g, 1, labels, 0.0)?,
                )),
                None,
            ),
        };
        let transitions = store.add_uniform(format!("{prefix}.crf.transitions"), g, labels + 2, labels + 2, bound, rng)?;
        Ok(Decoder { layout, lstm, emission, dynet, transitions, feature_dim })
    }

    fn schema_for(layout: DecoderLayout) -> TagSchema {
        match layout {
            DecoderLayout::Joint { attributes } => TagSchema::Joint { attributes },
            _ => TagSchema::PerAttribute,
        }
    }

    pub fn schema(&self) -> TagSchema {
        Self::schema_for(self.layout)
    }

    fn check_features(&self, tape: &Tape<'_>, features: Var) -> Result<()> {
        let d = tape.value(features).cols();
        if d != self.feature_dim {
            return Err(Error::dim("decoder", format!("feature width {d}, expected {}", self.feature_dim)));
        }
        Ok(())
    }

    fn emit(&self, tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
        let (w, b) = self.emission.ok_or_else(|| Error::contract("layout has no shared tag projection"))?;
        let (w, b) = (tape.param(w), tape.param(b));
        let z = tape.matmul(hidden, w)?;
        tape.add_row(z, b)
    }

    /// Emissions `(S, 3)` for each guiding representation `(1, D)`.
    ///
    /// The input projection of `[f | c ⊙ f]` is split into `f·W_top` and
    /// `c ⊙ (f·W_bottom)`, so the two products are shared by every attribute.
    pub fn guided_emissions(&self, tape: &mut Tape<'_>, features: Var, reps: &[Var]) -> Result<Vec<Var>> {
        if self.layout != DecoderLayout::Guided {
            return Err(Error::contract("guided emissions need the guided layout"));
        }
        self.check_features(tape, features)?;
        if reps.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.feature_dim;
        let mut pre = [Vec::with_capacity(reps.len()), Vec::with_capacity(reps.len())];
        for (slot, dir) in [self.lstm.forward, self.lstm.backward].into_iter().enumerate() {
            let w = tape.param(dir.w_in);
            let b = tape.param(dir.bias);
            let top = tape.row_slice(w, 0, d)?;
            let bottom = tape.row_slice(w, d, 2 * d)?;
            let plain = tape.matmul(features, top)?;
            let plain = tape.add_row(plain, b)?;
            let gated = tape.matmul(features, bottom)?;
            for &rep in reps {
                let cos = tape.cosine_rows(features, rep)?;
                let scaled = tape.scale_rows(gated, cos)?;
                pre[slot].push(tape.add(plain, scaled)?);
            }
        }
        let hidden = self.lstm.recur(tape, &pre[0], &pre[1])?;
        hidden.into_iter().map(|h| self.emit(tape, h)).collect()
    }

    /// Emissions `(S, 3)` for each attribute using the per-attribute bank.
    pub fn dynet_emissions(&self, tape: &mut Tape<'_>, features: Var, attributes: &[usize]) -> Result<Vec<Var>> {
        let bank = self.dynet.as_ref().ok_or_else(|| Error::contract("dynet emissions need the dynet layout"))?;
        self.check_features(tape, features)?;
        if attributes.is_empty() {
            return Ok(Vec::new());
        }
        let hidden = self.lstm.encode(tape, features)?;
        attributes.iter().map(|&a| bank.scores(tape, hidden, a)).collect()
    }

    /// One `(S, 2C + 1)` emission block.
    pub fn joint_emissions(&self, tape: &mut Tape<'_>, features: Var) -> Result<Var> {
        if !matches!(self.layout, DecoderLayout::Joint { .. }) {
            return Err(Error::contract("joint emissions need the joint layout"));
        }
        self.check_features(tape, features)?;
        let hidden = self.lstm.encode(tape, features)?;
        self.emit(tape, hidden)
    }

    pub fn log_likelihood(&self, tape: &mut Tape<'_>, emissions: Var, gold: &[usize]) -> Result<Var> {
        let t = tape.param(self.transitions);
        tape.crf_log_likelihood(emissions, t, gold)
    }

    pub fn viterbi(&self, tape: &Tape<'_>, emissions: Var, attribute: Option<usize>) -> Result<TagSequence> {
        let mut seq = crf::viterbi_decode(tape.value(emissions), tape.store().value(self.transitions))?;
        seq.attribute = attribute;
        Ok(seq)
    }

    /// Decodes one attribute that the range step selected. `rep` is the
    /// guiding vector under the guided layout and ignored under `Dynet`.
    pub fn decode_for_attribute(
        &self,
        tape: &mut Tape<'_>,
        features: Var,
        attribute: usize,
        rep: Option<Var>,
        selected: &[usize],
    ) -> Result<TagSequence> {
        if !selected.contains(&attribute) {
            return Err(Error::contract(format!("attribute {attribute} is not in the selected range")));
        }
        let emissions = match self.layout {
            DecoderLayout::Guided => {
                let rep = rep.ok_or_else(|| Error::contract("guided decoding needs a representation"))?;
                self.guided_emissions(tape, features, &[rep])?.remove(0)
            }
            DecoderLayout::Dynet => self.dynet_emissions(tape, features, &[attribute])?.remove(0),
            DecoderLayout::Joint { .. } => return Err(Error::contract("joint layout decodes all attributes at once")),
        };
        self.viterbi(tape, emissions, Some(attribute))
    }
}

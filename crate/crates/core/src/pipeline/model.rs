use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Fusion, Modality, ModelDims, ModelVariant, RangeMode};
use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::crf::TagSequence;
use crate::data::{EncodedRecord, Vocabulary};
use crate::decoder::{Decoder, DecoderLayout};
use crate::encoders::{LengthPolicy, PatchEncoder, TokenEmbedding, TransformerEncoder};
use crate::error::{Error, Result};
use crate::par::{
    attribute_representation, AttributeCatalog, Policy, PrototypeTable, RangeHead, RangePrediction, Representation,
    TextEncoder,
};
use crate::tensor::Tensor;
use crate::tir::{attention, AttentionParams, TirParams};

/// An assembled network: parameters plus the forward plan its variant implies.
#[derive(Clone, Debug)]
pub struct Model {
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub catalog: AttributeCatalog,
    pub vocab: Vocabulary,
    pub threshold: f64,
    pub store: ParamStore,
    embedding: TokenEmbedding,
    patch: Option<PatchEncoder>,
    transformer: TransformerEncoder,
    extra_self: Option<(AttentionParams, ParamId)>,
    tir: Option<TirParams>,
    range_head: Option<RangeHead>,
    prototypes: Option<PrototypeTable>,
    decoder: Decoder,
    dictionary: Vec<Vec<usize>>,
}

/// Which attributes get a tag sequence.
#[derive(Clone, Debug)]
pub enum Targets {
    /// Fixed list, used in training (gold range plus sampled negatives).
    Attributes(Vec<usize>),
    /// Whatever the range head selects.
    Predicted,
}

/// Nodes of one forward pass.
pub struct Graph {
    pub range_logits: Option<Var>,
    pub range: Option<RangePrediction>,
    /// `(attribute, emissions)`; the attribute is `None` for the joint block.
    pub emissions: Vec<(Option<usize>, Var)>,
    pub maps: Option<AttentionMaps>,
    pub transitions: ParamId,
}

/// Attention maps of the fusion step. Cross maps exist only for TIR.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub self_map: Tensor,
    pub cross_map: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub crf_nll: f64,
    pub bce: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Option<Vec<f64>>,
    pub selected: Vec<usize>,
    pub sequences: Vec<TagSequence>,
    pub maps: Option<AttentionMaps>,
}

struct TextOnly<'m> {
    embedding: &'m TokenEmbedding,
    transformer: &'m TransformerEncoder,
}

impl TextEncoder for TextOnly<'_> {
    fn encode_ids(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let x = self.embedding.embed(tape, ids, LengthPolicy::Lenient)?;
        self.transformer.encode(tape, x)
    }
}

impl Model {
    pub fn new(
        variant: ModelVariant,
        dims: ModelDims,
        catalog: AttributeCatalog,
        vocab: Vocabulary,
        threshold: f64,
        seed: u64,
    ) -> Result<Self> {
        variant.validate()?;
        crate::par::check_threshold(threshold)?;
        let d = dims.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = catalog.len();

        let embedding = TokenEmbedding::new(&mut store, "text.embedding", vocab.len(), dims.max_len, d, bound, &mut rng)?;
        let patch = match variant.modality {
            Modality::TextImage => Some(PatchEncoder::new(
                &mut store,
                "image",
                dims.image_size,
                dims.conv_channels,
                d,
                dims.modality_embedding,
                bound,
                &mut rng,
            )?),
            Modality::TextOnly => None,
        };
        let transformer = TransformerEncoder::new(&mut store, "text.encoder", d, dims.layers, dims.heads, bound, &mut rng)?;
        let (extra_self, tir) = match (variant.modality, variant.fusion) {
            (Modality::TextImage, Fusion::ExtraSelfAttn) => {
                let p = AttentionParams::new(&mut store, "fusion.self", d, dims.attention_dim, dims.normalize_attention, bound, &mut rng)?;
                let w = store.add_uniform("fusion.self.w_m", ParamGroup::TaskSpecific, dims.attention_dim, d, bound, &mut rng)?;
                (Some((p, w)), None)
            }
            (Modality::TextImage, Fusion::Tir) => {
                let t = TirParams::new(&mut store, "fusion.tir", d, dims.attention_dim, dims.normalize_attention, bound, &mut rng)?;
                (None, Some(t))
            }
            _ => (None, None),
        };
        let (range_head, prototypes, layout) = match variant.range {
            RangeMode::MaxRangeJoint => (None, None, DecoderLayout::Joint { attributes: c }),
            RangeMode::Par => {
                let head = RangeHead::new(&mut store, "range.w_cls", d, c, threshold, bound, &mut rng)?;
                let policy = variant.policy.expect("validated");
                let protos = match policy {
                    Policy::Prototype => Some(PrototypeTable::new(&mut store, "range.prototypes", c, d, bound, &mut rng)?),
                    _ => None,
                };
                let layout = if policy == Policy::Dynet { DecoderLayout::Dynet } else { DecoderLayout::Guided };
                (Some(head), protos, layout)
            }
        };
        let decoder = Decoder::new(&mut store, "decoder", layout, d, dims.hidden, c, bound, &mut rng)?;
        let dictionary = (0..c).map(|a| vocab.encode(catalog.words(a), false)).collect::<Result<Vec<_>>>()?;
        Ok(Model {
            variant,
            dims,
            catalog,
            vocab,
            threshold,
            store,
            embedding,
            patch,
            transformer,
            extra_self,
            tir,
            range_head,
            prototypes,
            decoder,
            dictionary,
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encode_record(&self, record: &crate::data::Record) -> Result<EncodedRecord> {
        EncodedRecord::new(record, &self.vocab, &self.catalog, false)
    }

    /// Token features `(S, D)` (classification slot removed), the pooled
    /// feature `(1, D)` and the fusion maps when the variant has them.
    fn encode(&self, tape: &mut Tape<'_>, ids: &[usize], image: &[f32]) -> Result<(Option<Var>, Var, Option<AttentionMaps>)> {
        let x_t = self.embedding.embed(tape, ids, LengthPolicy::Lenient)?;
        let rows = tape.value(x_t).rows();
        let mut maps = None;
        let hidden = match &self.patch {
            None => self.transformer.encode(tape, x_t)?,
            Some(patch) => {
                let size = self.dims.image_size;
                let x_v = patch.encode(tape, size, size, image)?;
                if let Some(tir) = &self.tir {
                    let fused = tir.apply(tape, x_t, x_v)?;
                    maps = Some(AttentionMaps { self_map: fused.self_map, cross_map: Some(fused.cross_map) });
                    self.transformer.encode(tape, fused.embedding)?
                } else {
                    let mut joint = tape.concat_rows(&[x_t, x_v])?;
                    if let Some((params, w_m)) = &self.extra_self {
                        let (att, map) = attention(tape, joint, joint, params)?;
                        maps = Some(AttentionMaps { self_map: tape.value(map).clone(), cross_map: None });
                        let w = tape.param(*w_m);
                        let projected = tape.matmul(att, w)?;
                        joint = tape.add(joint, projected)?;
                    }
                    let h = self.transformer.encode(tape, joint)?;
                    tape.row_slice(h, 0, rows)?
                }
            }
        };
        let pooled = tape.row_slice(hidden, 0, 1)?;
        let features = if rows > 1 { Some(tape.row_slice(hidden, 1, rows)?) } else { None };
        Ok((features, pooled, maps))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ids: &[usize], image: &[f32], targets: &Targets) -> Result<Graph> {
        let (features, pooled, maps) = self.encode(tape, ids, image)?;
        let mut graph =
            Graph { range_logits: None, range: None, emissions: Vec::new(), maps, transitions: self.decoder.transitions };
        match &self.range_head {
            None => {
                if let Some(f) = features {
                    graph.emissions.push((None, self.decoder.joint_emissions(tape, f)?));
                }
            }
            Some(head) => {
                let logits = head.logits(tape, pooled)?;
                let scores: Vec<f64> =
                    tape.value(logits).data().iter().map(|&z| crate::autodiff::kernels::sigmoid(z)).collect();
                let range = RangePrediction::from_scores(scores, self.threshold);
                let attributes = match targets {
                    Targets::Attributes(a) => a.clone(),
                    Targets::Predicted => range.selected.clone(),
                };
                graph.range_logits = Some(logits);
                graph.range = Some(range);
                if let (Some(f), false) = (features, attributes.is_empty()) {
                    let blocks = if self.decoder.layout == DecoderLayout::Dynet {
                        self.decoder.dynet_emissions(tape, f, &attributes)?
                    } else {
                        let reps = self.representations(tape, &attributes)?;
                        self.decoder.guided_emissions(tape, f, &reps)?
                    };
                    graph.emissions.extend(attributes.into_iter().map(Some).zip(blocks));
                }
            }
        }
        Ok(graph)
    }

    fn representations(&self, tape: &mut Tape<'_>, attributes: &[usize]) -> Result<Vec<Var>> {
        let encoder = TextOnly { embedding: &self.embedding, transformer: &self.transformer };
        let source = match &self.prototypes {
            Some(p) => Representation::Prototype(p),
            None => Representation::BertGuided { encoder: &encoder, dictionary: &self.dictionary },
        };
        attributes.iter().map(|&a| attribute_representation(tape, &source, a)).collect()
    }

    pub fn predict(&self, record: &EncodedRecord) -> Result<Prediction> {
        let mut tape = Tape::new(&self.store);
        let graph = self.forward(&mut tape, &record.ids, &record.image, &Targets::Predicted)?;
        let mut sequences = Vec::with_capacity(graph.emissions.len());
        for &(attribute, e) in &graph.emissions {
            sequences.push(self.decoder.viterbi(&tape, e, attribute)?);
        }
        let (scores, selected) = match graph.range {
            Some(r) => (Some(r.scores), r.selected),
            None => (None, Vec::new()),
        };
        Ok(Prediction { scores, selected, sequences, maps: graph.maps })
    }
}

/// Mean CRF negative log-likelihood over the decoded blocks plus `lambda`
/// times the mean binary cross-entropy of the range scores.
pub fn compute_loss(tape: &mut Tape<'_>, graph: &Graph, gold: &EncodedRecord, lambda: f64) -> Result<(Var, LossBreakdown)> {
    let mut crf_sum: Option<Var> = None;
    for &(attribute, e) in &graph.emissions {
        let labels = match attribute {
            Some(a) => gold
                .tags
                .get(a)
                .ok_or_else(|| Error::contract(format!("no gold tags for attribute {a}")))?,
            None => &gold.joint,
        };
        let rows = tape.value(e).rows();
        if labels.len() != rows {
            return Err(Error::contract(format!("{} gold labels for {rows} emission rows", labels.len())));
        }
        let t = tape.param(graph.transitions);
        let ll = tape.crf_log_likelihood(e, t, labels)?;
        crf_sum = Some(match crf_sum {
            Some(s) => tape.add(s, ll)?,
            None => ll,
        });
    }
    let crf = match crf_sum {
        Some(s) => tape.scale(s, -1.0 / graph.emissions.len() as f64)?,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    let (total, bce) = match graph.range_logits {
        Some(logits) => {
            let b = tape.bce_with_logits(logits, &gold.range)?;
            let weighted = tape.scale(b, lambda)?;
            (tape.add(crf, weighted)?, tape.value(b).item())
        }
        None => (crf, 0.0),
    };
    let breakdown = LossBreakdown { crf_nll: tape.value(crf).item(), bce, total: tape.value(total).item() };
    Ok((total, breakdown))
}


/// Gradient check of the mean training loss over `batch`, with every PAR
/// variant decoding exactly the gold attributes.
pub fn loss_grad_check(model: &Model, batch: &[EncodedRecord], lambda: f64, config: GradCheckConfig) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut store = model.store.clone();
    let f = |tape: &mut Tape<'_>| -> Result<Var> {
        let mut total: Option<Var> = None;
        for record in batch {
            let gold: Vec<usize> = (0..record.range.len()).filter(|&a| record.range[a] > 0.5).collect();
            let graph = model.forward(tape, &record.ids, &record.image, &Targets::Attributes(gold))?;
            let (loss, _) = compute_loss(tape, &graph, record, lambda)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        tape.scale(total.expect("nonempty"), 1.0 / batch.len() as f64)
    };
    grad_check(&mut store, f, config)
}

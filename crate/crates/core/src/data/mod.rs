//! Records, the synthetic corpus generator, vocabulary, batching and JSONL
//! transport.

mod batch;
mod jsonl;
mod render;
mod synthetic;
mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use batch::{encode_batch, Batch, EncodedRecord};
pub use jsonl::{read_jsonl, write_jsonl, ImageEncoding, IMAGE_GENERATOR};
pub use render::{render_image, RenderRules};
pub use synthetic::{generate_corpus, AttributeSpec, DistractorTemplate, PhraseTemplate, SyntheticSpec};
pub use vocab::{Vocabulary, CLS, PAD, UNK};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Row-major `height × width × 3` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

/// Inclusive token span carrying one value of `attribute`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub attribute: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub tokens: Vec<String>,
    pub image: Image,
    pub spans: Vec<Span>,
    pub split: Split,
    /// Gold attribute range, sorted and deduplicated.
    pub attributes: Vec<String>,
    /// Noise seed the renderer used, when the image was generated.
    pub noise_seed: Option<u64>,
}

impl Record {
    pub fn surface(&self, span: &Span) -> String {
        self.tokens[span.start..=span.end].join(" ")
    }

    /// Checks spans against the text and the declared attribute range.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        let mut sorted: Vec<&Span> = self.spans.iter().collect();
        sorted.sort_by_key(|s| (s.start, s.end));
        for s in &sorted {
            if s.start > s.end {
                return Err(format!("span {}..{} of {} has start after end", s.start, s.end, s.attribute));
            }
            if s.end >= n {
                return Err(format!("span {}..{} of {} exceeds {} tokens", s.start, s.end, s.attribute, n));
            }
        }
        for w in sorted.windows(2) {
            if w[1].start <= w[0].end {
                return Err(format!("spans at {} and {} overlap", w[0].start, w[1].start));
            }
        }
        let from_spans: BTreeSet<&str> = self.spans.iter().map(|s| s.attribute.as_str()).collect();
        let declared: BTreeSet<&str> = self.attributes.iter().map(String::as_str).collect();
        if from_spans != declared {
            return Err(format!("attribute range {declared:?} disagrees with spans {from_spans:?}"));
        }
        if self.image.pixels.len() != self.image.height * self.image.width * 3 {
            return Err(format!(
                "image has {} values for {}x{}x3",
                self.image.pixels.len(),
                self.image.height,
                self.image.width
            ));
        }
        Ok(())
    }
}

/// The records of one corpus plus the attribute names in catalog order.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub attributes: Vec<String>,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

pub(crate) fn validation(line: usize, detail: impl Into<String>) -> Error {
    Error::Validation { line, detail: detail.into() }
}

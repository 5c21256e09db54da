use super::{Record, Vocabulary, PAD};
use crate::crf::{TagSchema, B, I, O};
use crate::error::{Error, Result};
use crate::par::AttributeCatalog;

/// One record in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRecord {
    pub ids: Vec<usize>,
    pub image: Vec<f32>,
    /// Multi-hot gold attribute range in catalog order.
    pub range: Vec<f64>,
    /// Per-attribute B-I-O labels, `tags[a][j]`; all `O` for absent attributes.
    pub tags: Vec<Vec<usize>>,
    /// Labels over the joint `2C + 1` alphabet.
    pub joint: Vec<usize>,
}

impl EncodedRecord {
    pub fn new(record: &Record, vocab: &Vocabulary, catalog: &AttributeCatalog, strict: bool) -> Result<Self> {
        let ids = vocab.encode(&record.tokens, strict)?;
        let c = catalog.len();
        let n = ids.len();
        let schema = TagSchema::Joint { attributes: c };
        let mut range = vec![0.0; c];
        let mut tags = vec![vec![O; n]; c];
        let mut joint = vec![O; n];
        for s in &record.spans {
            let a = catalog
                .index(&s.attribute)
                .ok_or_else(|| Error::Catalog(format!("record {} uses unknown attribute {}", record.id, s.attribute)))?;
            if s.start > s.end || s.end >= n {
                return Err(Error::contract(format!("record {} has span {}..{} outside {n} tokens", record.id, s.start, s.end)));
            }
            range[a] = 1.0;
            tags[a][s.start] = B;
            joint[s.start] = schema.begin(a);
            for j in s.start + 1..=s.end {
                tags[a][j] = I;
                joint[j] = schema.inside(a);
            }
        }
        Ok(EncodedRecord { ids, image: record.image.pixels.clone(), range, tags, joint })
    }
}

/// Records padded to a common width. Padding cells never reach the CRF: the
/// model consumes `records[k]` at its true length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub records: Vec<EncodedRecord>,
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    /// `true` on real tokens, `false` on padding.
    pub mask: Vec<Vec<bool>>,
}

pub fn encode_batch(records: &[&Record], vocab: &Vocabulary, catalog: &AttributeCatalog, strict: bool) -> Result<Batch> {
    let encoded: Vec<EncodedRecord> =
        records.iter().map(|r| EncodedRecord::new(r, vocab, catalog, strict)).collect::<Result<_>>()?;
    let width = encoded.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    let lengths: Vec<usize> = encoded.iter().map(|e| e.ids.len()).collect();
    let ids = encoded
        .iter()
        .map(|e| {
            let mut row = e.ids.clone();
            row.resize(width, PAD);
            row
        })
        .collect();
    let mask = lengths.iter().map(|&l| (0..width).map(|j| j < l).collect()).collect();
    Ok(Batch { records: encoded, ids, lengths, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Span, Split};

    fn record(tokens: &[&str], spans: Vec<Span>) -> Record {
        let mut attributes: Vec<String> = spans.iter().map(|s| s.attribute.clone()).collect();
        attributes.sort();
        attributes.dedup();
        Record {
            id: "x".into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            image: Image { height: 1, width: 1, pixels: vec![0.0; 3] },
            spans,
            split: Split::Train,
            attributes,
            noise_seed: None,
        }
    }

    #[test]
    fn padding_and_tags() {
        let catalog = AttributeCatalog::from_names(&["Color", "Type"]).unwrap();
        let vocab = Vocabulary::build(["a", "navy", "blue", "shirt", "in"]);
        let r1 = record(&["a", "shirt", "in"], vec![Span { attribute: "Type".into(), start: 1, end: 1 }]);
        let r2 = record(
            &["in", "navy", "blue", "a", "shirt"],
            vec![
                Span { attribute: "Color".into(), start: 1, end: 2 },
                Span { attribute: "Type".into(), start: 4, end: 4 },
            ],
        );
        let single = encode_batch(&[&r1], &vocab, &catalog, true).unwrap();
        assert!(single.mask[0].iter().all(|&m| m));
        let batch = encode_batch(&[&r1, &r2], &vocab, &catalog, true).unwrap();
        assert_eq!(batch.ids[0].len(), 5);
        assert_eq!(batch.mask.iter().flatten().filter(|&&m| !m).count(), 2);
        let e = &batch.records[1];
        assert_eq!(e.range, vec![1.0, 1.0]);
        assert_eq!(e.tags[0], vec![O, B, I, O, O]);
        assert_eq!(e.tags[1], vec![O, O, O, O, B]);
        assert_eq!(e.joint, vec![0, 1, 2, 0, 3]);
        assert_eq!(vocab.decode(&e.ids), r2.tokens);
    }
}

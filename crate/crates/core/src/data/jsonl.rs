use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use super::{validation, Image, Record, Span, Split};
use crate::error::{Error, Result};

/// Name written in the `generator` field of referenced images.
pub const IMAGE_GENERATOR: &str = "synthetic-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageEncoding {
    /// Base64 of little-endian `f32` pixels.
    Embedded,
    /// Only the renderer noise seed; the image is re-rendered on read.
    Reference,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageField {
    Raw { height: usize, width: usize, data: String },
    Reference { generator: String, noise_seed: u64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    tokens: Vec<String>,
    image: ImageField,
    spans: Vec<Span>,
    split: Split,
    attributes: Vec<String>,
}

fn encode_pixels(pixels: &[f32]) -> String {
    let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_pixels(data: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(data).map_err(|e| format!("bad base64 image: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("image payload of {} bytes is not a whole number of floats", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes one JSON object per line. The file appears atomically: it is
/// written beside the target and renamed into place.
pub fn write_jsonl(path: &Path, records: &[Record], encoding: ImageEncoding) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let image = match (encoding, r.noise_seed) {
            (ImageEncoding::Reference, Some(seed)) => ImageField::Reference { generator: IMAGE_GENERATOR.into(), noise_seed: seed },
            (ImageEncoding::Reference, None) => {
                return Err(Error::contract(format!("record {} has no renderer seed to reference", r.id)));
            }
            (ImageEncoding::Embedded, _) => {
                ImageField::Raw { height: r.image.height, width: r.image.width, data: encode_pixels(&r.image.pixels) }
            }
        };
        let line = Line {
            id: r.id.clone(),
            tokens: r.tokens.clone(),
            image,
            spans: r.spans.clone(),
            split: r.split,
            attributes: r.attributes.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads and validates every line; any bad line fails the whole read.
/// Referenced images are re-rendered with `spec`.
pub fn read_jsonl(path: &Path, spec: &SyntheticSpec) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line =
            serde_json::from_str(raw).map_err(|e| Error::Parse { line: line_no, detail: e.to_string() })?;
        let (image, noise_seed) = match line.image {
            ImageField::Raw { height, width, data } => {
                let pixels = decode_pixels(&data).map_err(|d| validation(line_no, d))?;
                (Image { height, width, pixels }, None)
            }
            ImageField::Reference { generator, noise_seed } => {
                if generator != IMAGE_GENERATOR {
                    return Err(validation(line_no, format!("unknown image generator {generator:?}")));
                }
                let mut values = Vec::new();
                for s in &line.spans {
                    if s.start > s.end || s.end >= line.tokens.len() {
                        break; // reported by validate below
                    }
                    let a = spec
                        .attribute_index(&s.attribute)
                        .ok_or_else(|| validation(line_no, format!("unknown attribute {}", s.attribute)))?;
                    let surface = line.tokens[s.start..=s.end].join(" ");
                    let v = spec
                        .value_index(a, &surface)
                        .ok_or_else(|| validation(line_no, format!("{surface:?} is not a {} value", s.attribute)))?;
                    values.push((a, v));
                }
                (spec.render_for(&values, noise_seed), Some(noise_seed))
            }
        };
        let record = Record {
            id: line.id,
            tokens: line.tokens,
            image,
            spans: line.spans,
            split: line.split,
            attributes: line.attributes,
            noise_seed,
        };
        record.validate().map_err(|d| validation(line_no, d))?;
        records.push(record);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        // a final line without its newline was cut off mid-write
        return Err(Error::Parse { line: text.lines().count(), detail: "file ends without a newline".into() });
    }
    Ok(records)
}

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_image, RenderRules};
use super::{Corpus, Record, Span, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::par::AttributeCatalog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    /// Surface forms; multi-word values are space separated.
    pub values: Vec<String>,
    /// Words that describe the attribute itself.
    pub dictionary: Vec<String>,
}

/// A phrase mentioning one value, e.g. `made of {value}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseTemplate {
    pub attribute: String,
    pub pattern: String,
}

/// A phrase whose `{Attribute}` slots are filled with values that do not
/// describe the product, e.g. `pairs with {Color} {Type}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorTemplate {
    pub pattern: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub attributes: Vec<AttributeSpec>,
    pub templates: Vec<PhraseTemplate>,
    pub distractors: Vec<DistractorTemplate>,
    /// Two-slot patterns (`{a}`, `{b}`) naming the true hue next to a wrong one.
    pub ambiguous: Vec<String>,
    pub fillers: Vec<String>,
    pub min_attributes: usize,
    pub max_attributes: usize,
    /// Chance of a filler token in each gap between phrases.
    pub filler_rate: f64,
    pub distractor_rate: f64,
    pub ambiguity_rate: f64,
    /// Share of each lexicon kept out of the training split.
    pub holdout_fraction: f64,
    pub render: RenderRules,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn attr(name: &str, values: &[&str], dictionary: &[&str]) -> AttributeSpec {
    AttributeSpec {
        name: name.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
        dictionary: dictionary.iter().map(|v| v.to_string()).collect(),
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let attributes = vec![
            attr(
                "Color",
                &["red", "blue", "green", "yellow", "black", "white", "pink", "purple", "orange", "brown", "navy blue", "light gray"],
                &["color"],
            ),
            attr(
                "Type",
                &["shirt", "dress", "jacket", "skirt", "sweater", "coat", "hoodie", "blouse", "tank top", "jeans"],
                &["type", "garment"],
            ),
            attr(
                "Material",
                &["cotton", "linen", "wool", "silk", "denim", "polyester", "leather", "cashmere", "nylon", "faux fur"],
                &["material", "fabric"],
            ),
            attr("Length", &["short", "long", "midi", "mini", "cropped", "maxi", "knee", "extra long"], &["length"]),
            attr("Collar", &["crew", "v-neck", "polo", "mandarin", "turtleneck", "shawl", "hooded", "spread point"], &["collar"]),
            attr(
                "Pattern",
                &["striped", "plaid", "floral", "dotted", "solid", "checked", "paisley", "camo", "herringbone", "houndstooth"],
                &["pattern"],
            ),
            attr("Fit", &["slim", "loose", "relaxed", "tailored", "oversized", "skinny", "boxy", "straight leg"], &["fit"]),
            attr(
                "Brand",
                &["acme", "zenith", "lumen", "nordic", "blue harbor", "north peak", "veloce", "kinfolk", "arbor", "red fern"],
                &["brand"],
            ),
        ];
        let t = |a: &str, p: &str| PhraseTemplate { attribute: a.into(), pattern: p.into() };
        let templates = vec![
            t("Color", "color {value}"),
            t("Color", "in {value}"),
            t("Color", "{value} shade"),
            t("Type", "this {value}"),
            t("Type", "a {value}"),
            t("Type", "{value} for women"),
            t("Material", "made of {value}"),
            t("Material", "{value} fabric"),
            t("Length", "{value} length"),
            t("Length", "{value} cut"),
            t("Collar", "with {value} collar"),
            t("Collar", "{value} neckline"),
            t("Pattern", "{value} pattern"),
            t("Pattern", "in a {value} print"),
            t("Fit", "{value} fit"),
            t("Fit", "a {value} silhouette"),
            t("Brand", "by {value}"),
            t("Brand", "from {value}"),
        ];
        let distractors = ["pairs with {Color} {Type}", "goes well with {Type}", "looks great under a {Material} {Type}"]
            .iter()
            .map(|p| DistractorTemplate { pattern: p.to_string() })
            .collect();
        let palette = vec![
            [0.90, 0.10, 0.10],
            [0.15, 0.35, 0.95],
            [0.10, 0.75, 0.20],
            [0.95, 0.90, 0.10],
            [0.05, 0.05, 0.05],
            [0.97, 0.97, 0.97],
            [0.98, 0.55, 0.75],
            [0.55, 0.15, 0.70],
            [0.98, 0.55, 0.05],
            [0.50, 0.30, 0.10],
            [0.05, 0.10, 0.45],
            [0.78, 0.78, 0.80],
        ];
        SyntheticSpec {
            attributes,
            templates,
            distractors,
            ambiguous: vec!["in {a} or {b}".into(), "{a} or {b} available".into()],
            fillers: words(
                "new stylish comfortable perfect for everyday wear great gift idea limited offer soft and durable classic look season essential",
            ),
            min_attributes: 1,
            max_attributes: 4,
            filler_rate: 0.4,
            distractor_rate: 0.3,
            ambiguity_rate: 0.3,
            holdout_fraction: 0.2,
            render: RenderRules {
                size: 28,
                hue_attribute: "Color".into(),
                palette,
                glyph_attribute: "Type".into(),
                texture_attribute: "Pattern".into(),
                noise: 0.1,
            },
        }
    }
}

/// A tokenized phrase with spans relative to its first token.
struct Phrase {
    tokens: Vec<String>,
    spans: Vec<(usize, usize, usize)>,
}

impl SyntheticSpec {
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn value_index(&self, attribute: usize, surface: &str) -> Option<usize> {
        self.attributes[attribute].values.iter().position(|v| v == surface)
    }

    pub fn catalog(&self) -> Result<AttributeCatalog> {
        AttributeCatalog::new(
            self.attributes.iter().map(|a| a.name.clone()).collect(),
            self.attributes.iter().map(|a| a.dictionary.clone()).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let spec_err = |m: String| Err(Error::Spec(m));
        let mut names = HashSet::new();
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return spec_err(format!("attribute {} declared twice", a.name));
            }
            if a.values.len() < 2 {
                return spec_err(format!("attribute {} needs at least two values", a.name));
            }
        }
        for t in &self.templates {
            if !names.contains(t.attribute.as_str()) {
                return spec_err(format!("template {:?} references unknown attribute {}", t.pattern, t.attribute));
            }
            if !t.pattern.split_whitespace().any(|w| w == "{value}") {
                return spec_err(format!("template {:?} has no {{value}} slot", t.pattern));
            }
        }
        for a in &self.attributes {
            if !self.templates.iter().any(|t| t.attribute == a.name) {
                return spec_err(format!("no template covers attribute {}", a.name));
            }
        }
        for d in &self.distractors {
            for slot in slots(&d.pattern) {
                if !names.contains(slot) {
                    return spec_err(format!("distractor {:?} references unknown attribute {slot}", d.pattern));
                }
            }
        }
        for p in &self.ambiguous {
            let w: Vec<&str> = p.split_whitespace().collect();
            if !w.contains(&"{a}") || !w.contains(&"{b}") {
                return spec_err(format!("ambiguous pattern {p:?} needs {{a}} and {{b}}"));
            }
        }
        let r = &self.render;
        for name in [&r.hue_attribute, &r.glyph_attribute, &r.texture_attribute] {
            if !names.contains(name.as_str()) {
                return spec_err(format!("render rule references unknown attribute {name}"));
            }
        }
        let hue = self.attribute_index(&r.hue_attribute).expect("checked above");
        if r.palette.len() != self.attributes[hue].values.len() {
            return spec_err(format!("palette has {} colours for {} values", r.palette.len(), self.attributes[hue].values.len()));
        }
        if r.size == 0 || r.size % 14 != 0 {
            return spec_err(format!("image size {} is not a multiple of 14", r.size));
        }
        if self.min_attributes == 0 || self.min_attributes > self.max_attributes || self.max_attributes > self.attributes.len() {
            return spec_err(format!("attribute count range {}..={} is invalid", self.min_attributes, self.max_attributes));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return spec_err(format!("holdout fraction {} outside [0, 1)", self.holdout_fraction));
        }
        if self.fillers.is_empty() {
            return spec_err("filler list is empty".into());
        }
        Ok(())
    }

    /// Lexicon indices kept out of training, per attribute.
    pub fn heldout_values(&self, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        self.attributes
            .iter()
            .map(|a| {
                let n = a.values.len();
                let k = ((self.holdout_fraction * n as f64).ceil() as usize).min(n - 1);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                let mut out = idx[..k].to_vec();
                out.sort_unstable();
                out
            })
            .collect()
    }

    fn fill(&self, pattern: &str, slot: &str, value: &str) -> Phrase {
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for w in pattern.split_whitespace() {
            if w == slot {
                let start = tokens.len();
                tokens.extend(words(value));
                spans.push((0, start, tokens.len() - 1));
            } else {
                tokens.push(w.to_string());
            }
        }
        Phrase { tokens, spans }
    }

    fn generate_record(&self, seed: u64, index: usize, split: Split, allowed: &[Vec<usize>]) -> Record {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let c = self.attributes.len();
        let k = rng.gen_range(self.min_attributes..=self.max_attributes);
        let mut chosen = rand::seq::index::sample(&mut rng, c, k).into_vec();
        chosen.sort_unstable();
        let values: Vec<(usize, usize)> = chosen.iter().map(|&a| (a, *allowed[a].choose(&mut rng).expect("nonempty"))).collect();

        let hue = self.attribute_index(&self.render.hue_attribute).expect("validated");
        let mut phrases = Vec::new();
        for &(a, v) in &values {
            let value = &self.attributes[a].values[v];
            let mut phrase = if a == hue && rng.gen_bool(self.ambiguity_rate) {
                let other = loop {
                    let o = *allowed[a].choose(&mut rng).expect("nonempty");
                    if o != v {
                        break o;
                    }
                };
                let pattern = self.ambiguous.choose(&mut rng).expect("validated");
                let (true_slot, other_slot) = if rng.gen_bool(0.5) { ("{a}", "{b}") } else { ("{b}", "{a}") };
                let pattern = pattern.replace(other_slot, &self.attributes[a].values[other]);
                self.fill(&pattern, true_slot, value)
            } else {
                let options: Vec<&PhraseTemplate> = self.templates.iter().filter(|t| t.attribute == self.attributes[a].name).collect();
                let t = options.choose(&mut rng).expect("validated");
                self.fill(&t.pattern, "{value}", value)
            };
            for s in &mut phrase.spans {
                s.0 = a;
            }
            phrases.push(phrase);
        }
        if !self.distractors.is_empty() && rng.gen_bool(self.distractor_rate) {
            let d = self.distractors.choose(&mut rng).expect("nonempty");
            let mut tokens = Vec::new();
            for w in d.pattern.split_whitespace() {
                match w.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                    Some(name) => {
                        let a = self.attribute_index(name).expect("validated");
                        let v = *allowed[a].choose(&mut rng).expect("nonempty");
                        tokens.extend(words(&self.attributes[a].values[v]));
                    }
                    None => tokens.push(w.to_string()),
                }
            }
            phrases.push(Phrase { tokens, spans: Vec::new() });
        }
        phrases.shuffle(&mut rng);

        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for p in phrases {
            if rng.gen_bool(self.filler_rate) {
                tokens.push(self.fillers.choose(&mut rng).expect("validated").clone());
            }
            let base = tokens.len();
            for (a, s, e) in p.spans {
                spans.push(Span { attribute: self.attributes[a].name.clone(), start: base + s, end: base + e });
            }
            tokens.extend(p.tokens);
        }
        if rng.gen_bool(self.filler_rate) {
            tokens.push(self.fillers.choose(&mut rng).expect("validated").clone());
        }

        let noise_seed: u64 = rng.gen();
        let image = self.render_for(&values, noise_seed);
        let mut attributes: Vec<String> = values.iter().map(|&(a, _)| self.attributes[a].name.clone()).collect();
        attributes.sort();
        Record { id: format!("r{index:05}"), tokens, image, spans, split, attributes, noise_seed: Some(noise_seed) }
    }

    /// Renders the image for `(attribute, value)` lexicon indices.
    pub fn render_for(&self, values: &[(usize, usize)], noise_seed: u64) -> super::Image {
        let find = |name: &str| {
            let a = self.attribute_index(name)?;
            values.iter().find(|(x, _)| *x == a).map(|&(_, v)| v)
        };
        let r = &self.render;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        render_image(r, find(&r.hue_attribute), find(&r.glyph_attribute), find(&r.texture_attribute), &mut rng)
    }
}

fn slots(pattern: &str) -> impl Iterator<Item = &str> {
    pattern.split_whitespace().filter_map(|w| w.strip_prefix('{').and_then(|s| s.strip_suffix('}')))
}

/// Generates `n` records split 80/10/10. The result is a pure function of
/// `(spec, n, seed)`.
pub fn generate_corpus(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let heldout = spec.heldout_values(seed);
    let train_values: Vec<Vec<usize>> = spec
        .attributes
        .iter()
        .zip(&heldout)
        .map(|(a, h)| (0..a.values.len()).filter(|v| !h.contains(v)).collect())
        .collect();
    let all_values: Vec<Vec<usize>> = spec.attributes.iter().map(|a| (0..a.values.len()).collect()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    order.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    let records = exec::map_indexed(n, |i| {
        let allowed = if splits[i] == Split::Train { &train_values } else { &all_values };
        spec.generate_record(seed, i, splits[i], allowed)
    });
    Ok(Corpus { attributes: spec.attributes.iter().map(|a| a.name.clone()).collect(), records })
}

use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// What to do with texts longer than the positional table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthPolicy {
    Strict,
    /// Keep the first `max_len` tokens and log a warning.
    Lenient,
}

/// Token and positional embeddings plus a learned classification slot that is
/// prepended to every text.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub cls: ParamId,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl TokenEmbedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::PretrainedText;
        Ok(TokenEmbedding {
            tokens: store.add_uniform(format!("{prefix}.tokens"), g, vocab_size, dim, bound, rng)?,
            positions: store.add_uniform(format!("{prefix}.positions"), g, max_len, dim, bound, rng)?,
            cls: store.add_uniform(format!("{prefix}.cls"), g, 1, dim, bound, rng)?,
            vocab_size,
            max_len,
            dim,
        })
    }

    /// `(S + 1, D)`: row 0 is the classification slot, row `i + 1` is token
    /// `i` plus position `i`.
    pub fn embed(&self, tape: &mut Tape<'_>, ids: &[usize], policy: LengthPolicy) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Vocabulary(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let ids = if ids.len() > self.max_len {
            match policy {
                LengthPolicy::Strict => return Err(Error::Truncation { len: ids.len(), max: self.max_len }),
                LengthPolicy::Lenient => {
                    log::warn!("truncating text of {} tokens to {}", ids.len(), self.max_len);
                    &ids[..self.max_len]
                }
            }
        } else {
            ids
        };
        let cls = tape.param(self.cls);
        if ids.is_empty() {
            return Ok(cls);
        }
        let table = tape.param(self.tokens);
        let pos = tape.param(self.positions);
        let tok_rows: Vec<_> = ids.iter().map(|&id| (0, id)).collect();
        let pos_rows: Vec<_> = (0..ids.len()).map(|p| (0, p)).collect();
        let t = tape.gather_rows(&[table], &tok_rows)?;
        let p = tape.gather_rows(&[pos], &pos_rows)?;
        let body = tape.add(t, p)?;
        tape.concat_rows(&[cls, body])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, TokenEmbedding) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = TokenEmbedding::new(&mut store, "emb", 12, 4, 8, 0.125, &mut rng).unwrap();
        (store, e)
    }

    #[test]
    fn empty_text_is_only_the_classification_slot() {
        let (store, e) = setup();
        let mut tape = Tape::new(&store);
        let out = e.embed(&mut tape, &[], LengthPolicy::Strict).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 8]);
        assert_eq!(tape.value(out).data(), store.value(e.cls).data());
    }

    #[test]
    fn rows_are_token_plus_position() {
        let (store, e) = setup();
        let mut tape = Tape::new(&store);
        let out = e.embed(&mut tape, &[5, 9, 5], LengthPolicy::Strict).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[4, 8]);
        let tok = store.value(e.tokens);
        let pos = store.value(e.positions);
        for (i, &id) in [5usize, 9, 5].iter().enumerate() {
            for d in 0..8 {
                assert_eq!(v.get(i + 1, d), tok.get(id, d) + pos.get(i, d));
            }
        }
        // same token, different position
        assert_ne!(v.row_slice(1), v.row_slice(3));
    }

    #[test]
    fn unknown_ids_and_overlength() {
        let (store, e) = setup();
        let mut tape = Tape::new(&store);
        assert!(matches!(e.embed(&mut tape, &[12], LengthPolicy::Strict), Err(Error::Vocabulary(_))));
        assert!(matches!(
            e.embed(&mut tape, &[1, 2, 3, 4, 5], LengthPolicy::Strict),
            Err(Error::Truncation { len: 5, max: 4 })
        ));
        let out = e.embed(&mut tape, &[1, 2, 3, 4, 5], LengthPolicy::Lenient).unwrap();
        assert_eq!(tape.value(out).rows(), 5);
    }
}

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids first, then every distinct token in sorted order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let mut words: Vec<&str> = tokens.into_iter().collect();
        words.sort_unstable();
        words.dedup();
        let all: Vec<String> = RESERVED
            .iter()
            .copied()
            .chain(words.into_iter().filter(|w| !RESERVED.contains(w)))
            .map(String::from)
            .collect();
        Self::from_tokens(all)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Unknown tokens are an error when `strict`, otherwise they map to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], strict: bool) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| match self.id(t.as_ref()) {
                Some(id) => Ok(id),
                None if strict => Err(Error::Vocabulary(format!("token {:?} is not in the vocabulary", t.as_ref()))),
                None => Ok(UNK),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens.get(i).cloned().unwrap_or_else(|| RESERVED[UNK].to_string())).collect()
    }
}

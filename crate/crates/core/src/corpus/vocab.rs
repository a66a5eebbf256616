use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::LabeledExample;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Token ↔ index map. Indices 0..4 are `<pad>`, `<unk>`, `<bos>`, `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocab {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Frequency-thresholded vocabulary ordered by count (desc) then token.
pub fn build_vocab<'a, I>(sentences: I, min_count: usize) -> Vocab
where
    I: IntoIterator<Item = &'a [String]>,
{
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().filter(|(t, _)| ![PAD, UNK, BOS, EOS].contains(t)).map(|(t, _)| t.to_string()));
    Vocab::from_tokens(tokens)
}

pub fn vocab_from_examples(examples: &[LabeledExample], min_count: usize) -> Vocab {
    build_vocab(examples.iter().map(|e| e.utterance.tokens.as_slice()), min_count)
}

//! Caption tokenization and vocabulary construction.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Reserved id for padding.
pub const PAD_ID: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 1;

/// Token-to-id map with dense ids and two reserved slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuilds a vocabulary from its dense id order, as stored in a
    /// checkpoint. The first two entries must be the reserved tokens.
    pub fn from_id_order(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>" {
            return Err(Error::Format(
                "vocabulary must start with the reserved <pad> and <unk> entries".into(),
            ));
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { id_to_token: tokens, token_to_id })
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn split_words(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Builds a frequency-ranked vocabulary capped at `cap` entries including the
/// two reserved ids. Ties in frequency break lexicographically.
pub fn build_vocab<S: AsRef<str>>(captions: &[S], cap: usize) -> Result<Vocab> {
    if cap < 3 {
        return Err(Error::InvalidInput(format!(
            "vocabulary cap {cap} leaves no room beyond the reserved ids"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for caption in captions {
        for word in split_words(caption.as_ref()) {
            *counts.entry(word).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - 2);

    let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
    id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok(Vocab { id_to_token, token_to_id })
}

/// Maps a caption to exactly `len` token ids, padding with `PAD_ID` or
/// truncating the tail.
pub fn tokenize_to_ids(caption: &str, vocab: &Vocab, len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = split_words(caption)
        .into_iter()
        .take(len)
        .map(|w| vocab.id_of(&w))
        .collect();
    ids.resize(len, PAD_ID);
    ids
}

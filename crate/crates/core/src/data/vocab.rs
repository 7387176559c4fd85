//! Vocabulary and tokenization.
//!
//! Tokenization is deliberately simple: lowercase, split on whitespace,
//! strip leading/trailing punctuation per token.

use super::manifest::{DialogueRecord, Split};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("min_count must be >= 1")]
    BadMinCount,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("vocabulary file is not a bijection or lacks reserved tokens")]
    Invalid,
}

/// Token <-> id bijection with reserved `<pad>`, `<sos>`, `<eos>`, `<unk>`.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let mut v = Vocabulary { token_to_id: HashMap::new(), id_to_token: Vec::new() };
        for tok in [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            v.push(tok);
        }
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.to_string(), id);
        self.id_to_token.push(token.to_string());
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let map: HashMap<&str, usize> =
            self.id_to_token.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        std::fs::write(path, serde_json::to_vec_pretty(&map)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        let map: HashMap<String, usize> = serde_json::from_str(&text)?;
        let n = map.len();
        let mut id_to_token = vec![String::new(); n];
        for (tok, id) in &map {
            if *id >= n || !id_to_token[*id].is_empty() {
                return Err(VocabError::Invalid);
            }
            id_to_token[*id] = tok.clone();
        }
        let v = Vocabulary { token_to_id: map, id_to_token };
        let reserved_ok = v.id_to_token.get(PAD_ID).map(String::as_str) == Some(PAD_TOKEN)
            && v.id_to_token.get(SOS_ID).map(String::as_str) == Some(SOS_TOKEN)
            && v.id_to_token.get(EOS_ID).map(String::as_str) == Some(EOS_TOKEN)
            && v.id_to_token.get(UNK_ID).map(String::as_str) == Some(UNK_TOKEN);
        if !reserved_ok {
            return Err(VocabError::Invalid);
        }
        Ok(v)
    }
}

/// Lowercase and split a text into surface tokens.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// A padded id sequence; ids beyond `length` are `<pad>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub length: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let length = ids.iter().take_while(|&&id| id != PAD_ID).count();
        debug_assert!(ids[length..].iter().all(|&id| id == PAD_ID));
        TokenSequence { length, ids }
    }

    /// Pad on the right with `<pad>` up to `capacity`.
    pub fn padded(mut self, capacity: usize) -> Self {
        assert!(self.length <= capacity, "length exceeds capacity");
        self.ids.resize(capacity, PAD_ID);
        self
    }
}

/// Tokenize a text and frame it with `<sos>`/`<eos>` (decoder-target form).
/// Unknown tokens map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vec![SOS_ID];
    ids.extend(tokenize_text(text).iter().map(|t| vocab.id(t)));
    ids.push(EOS_ID);
    TokenSequence::new(ids)
}

/// Recover surface tokens, skipping structural markers.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| id != PAD_ID && id != SOS_ID && id != EOS_ID)
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Build a vocabulary from the train split: every token whose corpus
/// frequency is at least `min_count`, from captions, questions, answers and
/// summaries. Token order is first-occurrence, which makes the build
/// deterministic.
pub fn build_vocabulary(records: &[DialogueRecord], min_count: usize) -> Result<Vocabulary, VocabError> {
    if min_count < 1 {
        return Err(VocabError::BadMinCount);
    }
    let train: Vec<&DialogueRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let feed = |text: &str, counts: &mut HashMap<String, usize>, order: &mut Vec<String>| {
        for tok in tokenize_text(text) {
            let c = counts.entry(tok.clone()).or_insert(0);
            if *c == 0 {
                order.push(tok);
            }
            *c += 1;
        }
    };
    for rec in &train {
        feed(&rec.caption, &mut counts, &mut order);
        for (q, a) in &rec.qa_pairs {
            feed(q, &mut counts, &mut order);
            feed(a, &mut counts, &mut order);
        }
        feed(&rec.summary, &mut counts, &mut order);
    }
    let mut vocab = Vocabulary::with_reserved();
    for tok in order {
        if counts[&tok] >= min_count && !vocab.contains(&tok) {
            vocab.push(&tok);
        }
    }
    Ok(vocab)
}

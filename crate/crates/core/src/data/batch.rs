//! Padded batching: every token field is padded to the per-batch maximum.

use super::features::FeatureSet;
use super::manifest::{DialogueRecord, ROUNDS};
use super::vocab::{tokenize, Vocabulary, PAD_ID};
use super::FeatureStore;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("missing feature file for video_id {0}")]
    MissingFeatures(String),
    #[error("start round {0} out of range 1..=10")]
    BadStartRound(usize),
    #[error("empty batch")]
    Empty,
}

/// Padded id matrix `[batch, width]` plus per-row non-pad lengths.
#[derive(Clone, Debug)]
pub struct TokenMatrix {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl TokenMatrix {
    fn from_texts(texts: &[&str], vocab: &Vocabulary) -> Self {
        let seqs: Vec<_> = texts.iter().map(|t| tokenize(t, vocab)).collect();
        let width = seqs.iter().map(|s| s.length).max().unwrap_or(0);
        let lengths = seqs.iter().map(|s| s.length).collect();
        let ids = seqs.into_iter().map(|s| s.padded(width).ids).collect();
        TokenMatrix { ids, lengths, width }
    }

    pub fn batch(&self) -> usize {
        self.ids.len()
    }

    /// Column `t` of ids across the batch.
    pub fn column(&self, t: usize) -> Vec<usize> {
        self.ids.iter().map(|row| row[t]).collect()
    }

    /// 1.0 where position `t` is a real token in that row.
    pub fn valid_mask(&self, t: usize) -> Vec<f64> {
        self.ids.iter().map(|row| if row[t] != PAD_ID { 1.0 } else { 0.0 }).collect()
    }
}

/// One training/evaluation batch.
#[derive(Debug)]
pub struct Batch {
    pub video_ids: Vec<String>,
    pub features: Vec<FeatureSet>,
    pub captions: TokenMatrix,
    /// One matrix per dialog round.
    pub questions: Vec<TokenMatrix>,
    pub answers: Vec<TokenMatrix>,
    pub summaries: TokenMatrix,
    /// Start round per example, 1..=10.
    pub start_rounds: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }
}

/// Assemble a padded batch. `start_rounds` gives the first generated round
/// per record (1..=10).
pub fn pad_batch(
    records: &[DialogueRecord],
    features: &FeatureStore,
    vocab: &Vocabulary,
    start_rounds: &[usize],
) -> Result<Batch, BatchError> {
    if records.is_empty() {
        return Err(BatchError::Empty);
    }
    assert_eq!(records.len(), start_rounds.len());
    for &r in start_rounds {
        if !(1..=ROUNDS).contains(&r) {
            return Err(BatchError::BadStartRound(r));
        }
    }
    let mut fs = Vec::with_capacity(records.len());
    for rec in records {
        fs.push(
            features
                .get(&rec.video_id)
                .ok_or_else(|| BatchError::MissingFeatures(rec.video_id.clone()))?
                .clone(),
        );
    }
    let captions = TokenMatrix::from_texts(
        &records.iter().map(|r| r.caption.as_str()).collect::<Vec<_>>(),
        vocab,
    );
    let summaries = TokenMatrix::from_texts(
        &records.iter().map(|r| r.summary.as_str()).collect::<Vec<_>>(),
        vocab,
    );
    let mut questions = Vec::with_capacity(ROUNDS);
    let mut answers = Vec::with_capacity(ROUNDS);
    for round in 0..ROUNDS {
        questions.push(TokenMatrix::from_texts(
            &records.iter().map(|r| r.qa_pairs[round].0.as_str()).collect::<Vec<_>>(),
            vocab,
        ));
        answers.push(TokenMatrix::from_texts(
            &records.iter().map(|r| r.qa_pairs[round].1.as_str()).collect::<Vec<_>>(),
            vocab,
        ));
    }
    Ok(Batch {
        video_ids: records.iter().map(|r| r.video_id.clone()).collect(),
        features: fs,
        captions,
        questions,
        answers,
        summaries,
        start_rounds: start_rounds.to_vec(),
    })
}

//! The cooperative rollout engine: the 10-round loop, dynamic history
//! fusion, the standard test-case enumeration, and the two baselines.

use crate::agents::{
    AAttended, Ablation, AgentError, AttentionMode, Decode, Model, QAttended, ROUNDS,
};
use crate::attention::Attended;
use crate::data::{
    detokenize, pad_batch, BatchError, DialogueRecord, FeatureStore, Vocabulary,
};
use crate::encoders::EncodedSeq;
use crate::tensor::{Tape, T};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DialogError {
    #[error("start round {0} out of range (1..=10, or 11 for the strong baseline)")]
    BadStartRound(usize),
    #[error("history already holds {ROUNDS} pairs")]
    HistoryFull,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Encode(#[from] crate::encoders::EncodeError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("unknown video id {0}")]
    UnknownVideo(String),
}

/// Whether attended embeddings are refreshed after each history update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    #[default]
    Full,
    Partial,
}

/// Everything that shapes a rollout besides the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogModes {
    #[serde(default)]
    pub update: UpdateMode,
    #[serde(default)]
    pub attention: AttentionMode,
    #[serde(default)]
    pub ablation: Ablation,
}

/// Sentinel start round for the strong baseline: all 10 pairs are given.
pub const STRONG_BASELINE: usize = ROUNDS + 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub video_id: String,
    pub start_round: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TranscriptRound {
    pub question: String,
    pub answer: String,
    pub generated: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transcript {
    pub video_id: String,
    pub start_round: usize,
    pub rounds: Vec<TranscriptRound>,
    pub description: String,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("transcript serializes")
    }
}

/// The growing history: one pair embedding per completed round.
pub struct HistoryRows {
    rows: Vec<T>,
}

impl HistoryRows {
    pub fn new() -> Self {
        HistoryRows { rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Append the round's pair embedding; existing rows are untouched.
    pub fn push(&mut self, r_p: T) -> Result<(), DialogError> {
        if self.rows.len() == ROUNDS {
            return Err(DialogError::HistoryFull);
        }
        self.rows.push(r_p);
        Ok(())
    }

    pub fn stack(&self, tape: &mut Tape, model: &Model, batch: usize) -> EncodedSeq {
        model
            .history_enc
            .stack_history(tape, &model.params, &self.rows, batch)
            .expect("at most 10 rows by construction")
    }
}

impl Default for HistoryRows {
    fn default() -> Self {
        Self::new()
    }
}

/// Every (video, start round) pair of the standard test setting, in
/// deterministic order.
pub fn enumerate_test_cases(records: &[DialogueRecord]) -> Vec<EvalCase> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    ids.sort_unstable();
    ids.iter()
        .flat_map(|id| {
            (1..=ROUNDS).map(move |round| EvalCase { video_id: id.to_string(), start_round: round })
        })
        .collect()
}

/// One case per video with the full ground-truth dialog given.
pub fn enumerate_strong_cases(records: &[DialogueRecord]) -> Vec<EvalCase> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    ids.sort_unstable();
    ids.iter()
        .map(|id| EvalCase { video_id: id.to_string(), start_round: STRONG_BASELINE })
        .collect()
}

fn blend_attended(
    tape: &mut Tape,
    cached: &Attended,
    fresh: &Attended,
    use_cache: &Arc<Vec<f64>>,
) -> Attended {
    Attended {
        vector: tape.blend_rows(cached.vector, fresh.vector, Arc::clone(use_cache)),
        weights: fresh.weights,
    }
}

/// Per-dialog cache realizing the partial-update setting: attended
/// non-history embeddings freeze at each example's first generated round.
pub(crate) struct PartialCache {
    q: Option<QAttended>,
    a: Option<AAttended>,
}

impl PartialCache {
    pub(crate) fn new() -> Self {
        PartialCache { q: None, a: None }
    }

    pub(crate) fn fold_q(
        &mut self,
        tape: &mut Tape,
        fresh: QAttended,
        use_cache: &Arc<Vec<f64>>,
        partial: bool,
    ) -> QAttended {
        if !partial {
            return fresh;
        }
        let used = match &self.q {
            None => fresh,
            Some(c) => QAttended {
                start: blend_attended(tape, &c.start, &fresh.start, use_cache),
                end: blend_attended(tape, &c.end, &fresh.end, use_cache),
                history: fresh.history,
            },
        };
        self.q = Some(used.clone());
        used
    }

    pub(crate) fn fold_a(
        &mut self,
        tape: &mut Tape,
        fresh: AAttended,
        use_cache: &Arc<Vec<f64>>,
        partial: bool,
    ) -> AAttended {
        if !partial {
            return fresh;
        }
        let used = match &self.a {
            None => fresh,
            Some(c) => AAttended {
                audio: match (&c.audio, &fresh.audio) {
                    (Some(cc), Some(ff)) => Some(blend_attended(tape, cc, ff, use_cache)),
                    _ => fresh.audio,
                },
                frames: c
                    .frames
                    .iter()
                    .zip(&fresh.frames)
                    .map(|(cc, ff)| blend_attended(tape, cc, ff, use_cache))
                    .collect(),
                caption: match (&c.caption, &fresh.caption) {
                    (Some(cc), Some(ff)) => Some(blend_attended(tape, cc, ff, use_cache)),
                    _ => fresh.caption,
                },
                history: fresh.history,
            },
        };
        self.a = Some(used.clone());
        used
    }
}

/// Run full dialogs for a batch of records, one per example, each with its
/// own start round (`1..=10`, or [`STRONG_BASELINE`]). Rounds before the
/// start round replay the ground-truth pairs; the rest are generated
/// greedily by the two agents.
pub fn run_dialog_batch(
    model: &Model,
    records: &[DialogueRecord],
    features: &FeatureStore,
    vocab: &Vocabulary,
    start_rounds: &[usize],
    modes: &DialogModes,
) -> Result<Vec<Transcript>, DialogError> {
    assert_eq!(records.len(), start_rounds.len());
    for &s in start_rounds {
        if !(1..=STRONG_BASELINE).contains(&s) {
            return Err(DialogError::BadStartRound(s));
        }
    }
    let clamped: Vec<usize> = start_rounds.iter().map(|&s| s.min(ROUNDS)).collect();
    let batch = pad_batch(records, features, vocab, &clamped)?;
    let b = records.len();
    let partial = modes.update == UpdateMode::Partial;

    let mut tape = Tape::new();
    let q_inputs: Vec<crate::agents::QBotInput> = batch
        .features
        .iter()
        .map(crate::agents::QBotInput::from_features)
        .collect();
    let a_inputs: Vec<crate::agents::ABotInput> = batch
        .features
        .iter()
        .zip(records)
        .map(|(f, r)| crate::agents::ABotInput::from_features(f, &r.caption))
        .collect();
    let q_feats = model.q_feats(&mut tape, &q_inputs);
    let q_session = model.q_session(&mut tape, q_feats, b)?;
    let a_feats = model.a_feats(&mut tape, &a_inputs, &batch.captions, modes.ablation)?;
    let a_session = model.a_session(&mut tape, a_feats, b)?;

    let mut rows = HistoryRows::new();
    let mut cache = PartialCache::new();
    let mut transcripts: Vec<Transcript> = records
        .iter()
        .zip(start_rounds)
        .map(|(r, &s)| Transcript {
            video_id: r.video_id.clone(),
            start_round: s,
            rounds: Vec::new(),
            description: String::new(),
        })
        .collect();

    for round in 1..=ROUNDS {
        let gen_mask: Vec<f64> = start_rounds
            .iter()
            .map(|&s| if round >= s { 1.0 } else { 0.0 })
            .collect();
        let any_generated = gen_mask.iter().any(|&g| g > 0.0);
        let gt_pair = model.history_enc.encode_pair(
            &mut tape,
            &model.params,
            &batch.questions[round - 1],
            &batch.answers[round - 1],
        )?;
        let row = if any_generated {
            let hist = rows.stack(&mut tape, model, b);
            let use_cache: Arc<Vec<f64>> = Arc::new(
                start_rounds.iter().map(|&s| if partial && round > s { 1.0 } else { 0.0 }).collect(),
            );
            let q_att = model.q_attend(&mut tape, &q_session, &hist)?;
            let q_att = cache.fold_q(&mut tape, q_att, &use_cache, partial);
            let q_out = model.q_decode_with(
                &mut tape,
                &q_session,
                &q_att,
                Decode::Greedy,
                modes.ablation,
                &model.q_dec,
            )?;
            let hist_for_a = if modes.ablation.no_his_for_a { None } else { Some(&hist) };
            let a_att = model.a_attend(&mut tape, &a_session, hist_for_a)?;
            let a_att = cache.fold_a(&mut tape, a_att, &use_cache, partial);
            let a_out = model.a_decode_with(
                &mut tape,
                &a_session,
                &a_att,
                hist_for_a,
                q_out.embedding,
                modes.attention,
                Decode::Greedy,
                modes.ablation,
            )?;
            let r_p = model.pair_embedding(&mut tape, q_out.embedding, a_out.embedding);
            for i in 0..b {
                let generated = gen_mask[i] > 0.0;
                transcripts[i].rounds.push(if generated {
                    TranscriptRound {
                        question: detokenize(&q_out.tokens[i], vocab),
                        answer: detokenize(&a_out.tokens[i], vocab),
                        generated: true,
                    }
                } else {
                    TranscriptRound {
                        question: records[i].qa_pairs[round - 1].0.clone(),
                        answer: records[i].qa_pairs[round - 1].1.clone(),
                        generated: false,
                    }
                });
            }
            tape.blend_rows(r_p, gt_pair, Arc::new(gen_mask))
        } else {
            for (i, t) in transcripts.iter_mut().enumerate() {
                t.rounds.push(TranscriptRound {
                    question: records[i].qa_pairs[round - 1].0.clone(),
                    answer: records[i].qa_pairs[round - 1].1.clone(),
                    generated: false,
                });
            }
            gt_pair
        };
        rows.push(row)?;
    }

    let hist_full = rows.stack(&mut tape, model, b);
    let desc = model.qbot_describe(
        &mut tape,
        &q_session,
        &hist_full,
        Decode::Greedy,
        modes.ablation,
        false,
    )?;
    for (i, t) in transcripts.iter_mut().enumerate() {
        t.description = detokenize(&desc.tokens[i], vocab);
    }
    Ok(transcripts)
}

/// Rollout for a single record.
pub fn run_dialog(
    model: &Model,
    record: &DialogueRecord,
    features: &FeatureStore,
    vocab: &Vocabulary,
    start_round: usize,
    modes: &DialogModes,
) -> Result<Transcript, DialogError> {
    let mut out = run_dialog_batch(
        model,
        std::slice::from_ref(record),
        features,
        vocab,
        &[start_round],
        modes,
    )?;
    Ok(out.remove(0))
}

/// The basic baseline: Q-BOT describes straight from the null history, no
/// dialog at all.
pub fn basic_baseline_describe_batch(
    model: &Model,
    records: &[DialogueRecord],
    features: &FeatureStore,
    vocab: &Vocabulary,
    ablation: Ablation,
) -> Result<Vec<String>, DialogError> {
    let b = records.len();
    let mut fs = Vec::with_capacity(b);
    for r in records {
        fs.push(
            features
                .get(&r.video_id)
                .ok_or_else(|| DialogError::UnknownVideo(r.video_id.clone()))?,
        );
    }
    let mut tape = Tape::new();
    let q_inputs: Vec<crate::agents::QBotInput> =
        fs.iter().map(|f| crate::agents::QBotInput::from_features(f)).collect();
    let q_feats = model.q_feats(&mut tape, &q_inputs);
    let q_session = model.q_session(&mut tape, q_feats, b)?;
    let null_hist = model
        .history_enc
        .stack_history(&mut tape, &model.params, &[], b)
        .expect("null history");
    let desc = model.qbot_describe(&mut tape, &q_session, &null_hist, Decode::Greedy, ablation, true)?;
    Ok(desc.tokens.iter().map(|t| detokenize(t, vocab)).collect())
}

/// Shuffle a record's ground-truth QA pairs deterministically (the
/// shuffled-QA-order ablation).
pub fn shuffle_qa_pairs(record: &DialogueRecord, seed: u64) -> DialogueRecord {
    use rand::seq::SliceRandom;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = record.clone();
    out.qa_pairs.shuffle(&mut rng);
    out
}

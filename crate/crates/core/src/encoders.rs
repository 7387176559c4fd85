//! Modality encoders: token embedding, caption LSTM, pair-level history
//! encoding, and the visual/audio feature projections.
//!
//! Everything here is batched: token sequences arrive as padded
//! [`TokenMatrix`] values and entity sets leave in `[batch * n, d]` layout
//! with a `[batch, n]` validity mask, which is the shape the attention layer
//! consumes.

use crate::data::{TokenMatrix, PAD_ID};
use crate::nn::{Init, Linear, LstmCell, ParamId, Params};
use crate::tensor::{Tape, T};
use ndarray::Array2;
use std::sync::Arc;
use thiserror::Error;

pub const D_HISTORY: usize = 256;
pub const D_CAPTION: usize = 256;
pub const D_TOKEN_QA: usize = 128;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("empty token sequence")]
    EmptyInput,
    #[error("history holds {0} pairs; at most 10 are allowed")]
    HistoryFull(usize),
}

/// An embedding table; `<pad>` maps to the zero vector and receives no
/// gradient.
pub struct TokenTable {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl TokenTable {
    pub fn new(params: &mut Params, init: &mut Init, name: &str, vocab: usize, dim: usize) -> Self {
        TokenTable { table: params.register(name, init.uniform(vocab, dim, 0.1)), vocab, dim }
    }

    /// Look up one batch column of token ids: `[batch, dim]`.
    pub fn embed(&self, tape: &mut Tape, params: &Params, ids: &[usize]) -> T {
        let t = params.on(tape, self.table);
        tape.embed(t, ids, Some(PAD_ID))
    }
}

/// An encoded entity sequence in attention layout.
pub struct EncodedSeq {
    /// `[batch * n, d]`; entity `j` of example `i` is row `i * n + j`.
    pub entities: T,
    pub n: usize,
    /// `[batch, n]`, 1.0 on real tokens.
    pub mask: Arc<Array2<f64>>,
}

fn step_masks(tokens: &TokenMatrix) -> Vec<Arc<Vec<f64>>> {
    (0..tokens.width).map(|t| Arc::new(tokens.valid_mask(t))).collect()
}

fn mask_matrix(tokens: &TokenMatrix) -> Array2<f64> {
    Array2::from_shape_fn((tokens.batch(), tokens.width), |(i, t)| {
        if tokens.ids[i][t] != PAD_ID {
            1.0
        } else {
            0.0
        }
    })
}

/// Caption encoder: token embedding plus a single-layer LSTM; the full
/// hidden sequence is returned so attention can address individual tokens.
pub struct CaptionEncoder {
    pub table: TokenTable,
    pub cell: LstmCell,
}

impl CaptionEncoder {
    pub fn new(params: &mut Params, init: &mut Init, name: &str, vocab: usize) -> Self {
        Self::with_dims(params, init, name, vocab, D_CAPTION)
    }

    pub fn with_dims(
        params: &mut Params,
        init: &mut Init,
        name: &str,
        vocab: usize,
        d_caption: usize,
    ) -> Self {
        CaptionEncoder {
            table: TokenTable::new(params, init, &format!("{name}.emb"), vocab, d_caption),
            cell: LstmCell::new(params, init, &format!("{name}.lstm"), d_caption, d_caption),
        }
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &Params,
        tokens: &TokenMatrix,
    ) -> Result<EncodedSeq, EncodeError> {
        if tokens.width == 0 || tokens.batch() == 0 {
            return Err(EncodeError::EmptyInput);
        }
        let masks = step_masks(tokens);
        let mut state = self.cell.zero_state(tape, tokens.batch());
        let mut hidden = Vec::with_capacity(tokens.width);
        for t in 0..tokens.width {
            let x = self.table.embed(tape, params, &tokens.column(t));
            state = self.cell.step(tape, params, x, state, Some(&masks[t]));
            hidden.push(state.0);
        }
        let entities = tape.interleave_rows(&hidden);
        Ok(EncodedSeq { entities, n: tokens.width, mask: Arc::new(mask_matrix(tokens)) })
    }
}

/// History encoder: shared by both agents. A question-answer pair becomes
/// one 256-vector — the LSTM's state after the last real token of the
/// concatenated pair.
pub struct HistoryEncoder {
    pub table: TokenTable,
    pub cell: LstmCell,
    /// Stand-in entity for the empty history before round 1.
    pub null_history: ParamId,
}

impl HistoryEncoder {
    pub fn new(params: &mut Params, init: &mut Init, name: &str, vocab: usize) -> Self {
        Self::with_dims(params, init, name, vocab, D_TOKEN_QA, D_HISTORY)
    }

    pub fn with_dims(
        params: &mut Params,
        init: &mut Init,
        name: &str,
        vocab: usize,
        d_token: usize,
        d_history: usize,
    ) -> Self {
        HistoryEncoder {
            table: TokenTable::new(params, init, &format!("{name}.emb"), vocab, d_token),
            cell: LstmCell::new(params, init, &format!("{name}.lstm"), d_token, d_history),
            null_history: params.register(&format!("{name}.null"), init.uniform(1, d_history, 0.1)),
        }
    }

    /// Pair-level embedding `[batch, 256]`: run the LSTM over question then
    /// answer tokens; masking carries the state across padding, so the
    /// result is the hidden state at each row's final real token.
    pub fn encode_pair(
        &self,
        tape: &mut Tape,
        params: &Params,
        question: &TokenMatrix,
        answer: &TokenMatrix,
    ) -> Result<T, EncodeError> {
        if question.width == 0 || answer.width == 0 {
            return Err(EncodeError::EmptyInput);
        }
        assert_eq!(question.batch(), answer.batch());
        let mut state = self.cell.zero_state(tape, question.batch());
        for part in [question, answer] {
            let masks = step_masks(part);
            for t in 0..part.width {
                let x = self.table.embed(tape, params, &part.column(t));
                state = self.cell.step(tape, params, x, state, Some(&masks[t]));
            }
        }
        Ok(state.0)
    }

    /// The learned null-history entity replicated to `[batch, 256]`.
    pub fn null_entities(&self, tape: &mut Tape, params: &Params, batch: usize) -> T {
        let ones = tape.constant(Array2::ones((batch, 1)));
        let null = params.on(tape, self.null_history);
        tape.matmul(ones, null)
    }

    /// Stack per-round pair embeddings (`[batch, 256]` each, round order)
    /// into history entities `[batch * n_T, 256]`. Zero pairs yields the
    /// null-history entity.
    pub fn stack_history(
        &self,
        tape: &mut Tape,
        params: &Params,
        pairs: &[T],
        batch: usize,
    ) -> Result<EncodedSeq, EncodeError> {
        if pairs.len() > 10 {
            return Err(EncodeError::HistoryFull(pairs.len()));
        }
        if pairs.is_empty() {
            let entities = self.null_entities(tape, params, batch);
            return Ok(EncodedSeq { entities, n: 1, mask: Arc::new(Array2::ones((batch, 1))) });
        }
        let entities = tape.interleave_rows(pairs);
        let n = pairs.len();
        Ok(EncodedSeq { entities, n, mask: Arc::new(Array2::ones((batch, n))) })
    }
}

/// Shape-preserving learned projections for the raw video and audio
/// features.
pub struct FeatureProjector {
    pub visual: Linear,
    pub audio: Linear,
}

impl FeatureProjector {
    pub fn new(params: &mut Params, init: &mut Init, name: &str, d_visual: usize, d_audio: usize) -> Self {
        FeatureProjector {
            visual: Linear::new(params, init, &format!("{name}.vis"), d_visual, d_visual),
            audio: Linear::new(params, init, &format!("{name}.aud"), d_audio, d_audio),
        }
    }

    pub fn project_visual(&self, tape: &mut Tape, params: &Params, x: T) -> T {
        let y = self.visual.apply(tape, params, x);
        tape.tanh(y)
    }

    pub fn project_audio(&self, tape: &mut Tape, params: &Params, x: T) -> T {
        let y = self.audio.apply(tape, params, x);
        tape.tanh(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabulary, synth_dataset, tokenize, Vocabulary};
    use approx::assert_abs_diff_eq;

    fn vocab() -> Vocabulary {
        let corpus = synth_dataset(8, 1);
        build_vocabulary(&corpus.records, 1).unwrap()
    }

    fn matrix(texts: &[&str], v: &Vocabulary) -> TokenMatrix {
        let seqs: Vec<_> = texts.iter().map(|t| tokenize(t, v)).collect();
        let width = seqs.iter().map(|s| s.length).max().unwrap();
        TokenMatrix {
            lengths: seqs.iter().map(|s| s.length).collect(),
            ids: seqs.into_iter().map(|s| s.padded(width).ids).collect(),
            width,
        }
    }

    #[test]
    fn embed_matches_one_hot_multiplication() {
        let mut params = Params::new();
        let mut init = Init::new(3);
        let table = TokenTable::new(&mut params, &mut init, "emb", 11, 6);
        let ids = vec![4usize, 9, 4, 0, 10];
        let mut tape = Tape::new();
        let out = table.embed(&mut tape, &params, &ids);
        let tv = params.get(table.table);
        // explicit one-hot multiplication, with the <pad> row zeroed
        let mut onehot = Array2::<f64>::zeros((ids.len(), 11));
        for (r, &id) in ids.iter().enumerate() {
            if id != PAD_ID {
                onehot[[r, id]] = 1.0;
            }
        }
        let expected = onehot.dot(tv);
        let got = tape.value(out);
        for (a, b) in got.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // identical ids give identical rows; pad gives a zero row
        assert_eq!(got.row(0), got.row(2));
        assert!(got.row(3).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn caption_lengths_match_input() {
        let v = vocab();
        let mut params = Params::new();
        let mut init = Init::new(5);
        let enc = CaptionEncoder::new(&mut params, &mut init, "cap", v.len());
        for text in ["drawer", "the chef points at a lamp", "a b c d e f g h i j k"] {
            let m = matrix(&[text], &v);
            let mut tape = Tape::new();
            let out = enc.encode(&mut tape, &params, &m).unwrap();
            assert_eq!(out.n, m.width);
            assert_eq!(tape.value(out.entities).dim(), (m.width, D_CAPTION));
        }
    }

    #[test]
    fn caption_right_padding_invariance() {
        let v = vocab();
        let mut params = Params::new();
        let mut init = Init::new(7);
        let enc = CaptionEncoder::new(&mut params, &mut init, "cap", v.len());
        let short = matrix(&["the chef waves"], &v);
        let mut long = short.clone();
        for row in long.ids.iter_mut() {
            row.extend([PAD_ID; 5]);
        }
        long.width += 5;
        let mut tape = Tape::new();
        let a = enc.encode(&mut tape, &params, &short).unwrap();
        let b = enc.encode(&mut tape, &params, &long).unwrap();
        let va = tape.value(a.entities).clone();
        let vb = tape.value(b.entities);
        for r in 0..short.width {
            for c in 0..D_CAPTION {
                assert_eq!(va[[r, c]].to_bits(), vb[[r, c]].to_bits());
            }
        }
    }

    #[test]
    fn pair_embedding_padding_invariant_and_distinct() {
        let v = vocab();
        for seed in 0..10u64 {
            let mut params = Params::new();
            let mut init = Init::new(seed);
            let enc = HistoryEncoder::new(&mut params, &mut init, "his", v.len());
            let q = matrix(&["is there a lamp"], &v);
            let a = matrix(&["yes"], &v);
            let mut q_pad = q.clone();
            for row in q_pad.ids.iter_mut() {
                row.extend([PAD_ID; 3]);
            }
            q_pad.width += 3;
            let mut tape = Tape::new();
            let e1 = enc.encode_pair(&mut tape, &params, &q, &a).unwrap();
            let e2 = enc.encode_pair(&mut tape, &params, &q_pad, &a).unwrap();
            let v1 = tape.value(e1).clone();
            let v2 = tape.value(e2);
            assert!(v1.iter().zip(v2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

            // distinct pairs map to distinct vectors
            let q3 = matrix(&["is there a chair"], &v);
            let a3 = matrix(&["no"], &v);
            let e3 = enc.encode_pair(&mut tape, &params, &q3, &a3).unwrap();
            let v3 = tape.value(e3);
            let diff: f64 = v1.iter().zip(v3.iter()).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 1e-6, "seed {seed}: colliding pair embeddings");
        }
    }

    #[test]
    fn history_stacking_counts() {
        let v = vocab();
        let mut params = Params::new();
        let mut init = Init::new(2);
        let enc = HistoryEncoder::new(&mut params, &mut init, "his", v.len());
        let mut tape = Tape::new();
        let q = matrix(&["is anyone here", "is anyone here"], &v);
        let a = matrix(&["yes", "no"], &v);
        let pair = enc.encode_pair(&mut tape, &params, &q, &a).unwrap();

        let empty = enc.stack_history(&mut tape, &params, &[], 2).unwrap();
        assert_eq!(empty.n, 1);
        let nv = tape.value(empty.entities).clone();
        assert_eq!(nv.row(0), nv.row(1)); // both rows are the null vector

        for k in [5usize, 10] {
            let pairs = vec![pair; k];
            let st = enc.stack_history(&mut tape, &params, &pairs, 2).unwrap();
            assert_eq!(st.n, k);
            assert_eq!(tape.value(st.entities).dim(), (2 * k, D_HISTORY));
        }
        assert!(matches!(
            enc.stack_history(&mut tape, &params, &vec![pair; 11], 2),
            Err(EncodeError::HistoryFull(11))
        ));
    }

    #[test]
    fn projections_preserve_shape_and_scale_linearly() {
        let mut params = Params::new();
        let mut init = Init::new(9);
        let proj = FeatureProjector::new(&mut params, &mut init, "proj", 8, 5);
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_fn((4, 8), |(i, j)| (i + j) as f64 * 0.01));
        let y = proj.project_visual(&mut tape, &params, x);
        assert_eq!(tape.value(y).dim(), (4, 8));
        assert!(tape.value(y).iter().all(|v| v.is_finite()));

        // zero bias -> pre-activation map is homogeneous: f(ax) = a f(x)
        params.set(proj.visual.b, Array2::zeros((1, 8)));
        let w = params.on(&mut tape, proj.visual.w);
        let pre1 = tape.matmul(x, w);
        let x2 = tape.scale(x, 3.0);
        let pre2 = tape.matmul(x2, w);
        let scaled = tape.scale(pre1, 3.0);
        let d = tape.sub(pre2, scaled);
        assert!(tape.value(d).iter().all(|v| v.abs() < 1e-12));

        // zero input -> bias-determined output through the nonlinearity
        let z = tape.constant(Array2::zeros((2, 5)));
        let out = proj.project_audio(&mut tape, &params, z);
        let b = params.get(proj.audio.b).clone();
        for r in 0..2 {
            for c in 0..5 {
                assert_abs_diff_eq!(tape.value(out)[[r, c]], b[[0, c]].tanh(), epsilon = 1e-12);
            }
        }
    }
}

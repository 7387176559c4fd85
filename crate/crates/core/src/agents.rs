//! Q-BOT and A-BOT assembly: feature projections, the two attention
//! stacks, the visual and audio-visual LSTMs, and the three decoders
//! (question, answer, description).
//!
//! Everything runs batched on one tape. Q-BOT's inputs are confined to
//! [`QBotInput`] (start frame, end frame) plus the shared history, so the
//! information asymmetry between the agents is enforced by construction.

use crate::attention::{Attended, ImAttention, MmAttention, MmSession, ModalityInput};
use crate::data::{FeatureSet, TokenMatrix, EOS_ID, PAD_ID, SOS_ID};
use crate::encoders::{CaptionEncoder, EncodedSeq, FeatureProjector, HistoryEncoder, TokenTable};
use crate::nn::{Init, Linear, LstmCell, Params};
use crate::tensor::{Tape, T};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

pub const ROUNDS: usize = 10;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("audio-visual LSTM expects {expected} frames, got {found}")]
    FrameCount { found: usize, expected: usize },
    #[error("description requires a full {ROUNDS}-pair history, got {0} pairs")]
    HistoryIncomplete(usize),
    #[error("beam width must be at least 1")]
    BadBeamWidth,
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error(transparent)]
    Encode(#[from] crate::encoders::EncodeError),
}

fn default_d_history() -> usize { 256 }
fn default_d_caption() -> usize { 256 }
fn default_d_token() -> usize { 128 }
fn default_d_visual() -> usize { 512 }
fn default_regions() -> usize { 49 }
fn default_frames() -> usize { 4 }
fn default_d_audio() -> usize { 256 }
fn default_d_score() -> usize { 256 }
fn default_unary_hidden() -> usize { 64 }
fn default_max_decode() -> usize { 30 }
fn default_init_seed() -> u64 { 1 }

/// All width hyperparameters. The defaults are the paper-scale dimensions;
/// `tiny` shrinks every width for gradient checks and parameter-count
/// oracles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_d_history")]
    pub d_history: usize,
    #[serde(default = "default_d_caption")]
    pub d_caption: usize,
    #[serde(default = "default_d_token")]
    pub d_token: usize,
    #[serde(default = "default_d_visual")]
    pub d_visual: usize,
    #[serde(default = "default_regions")]
    pub regions: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_d_audio")]
    pub d_audio: usize,
    #[serde(default = "default_d_score")]
    pub d_score: usize,
    #[serde(default = "default_unary_hidden")]
    pub unary_hidden: usize,
    #[serde(default = "default_max_decode")]
    pub max_decode_len: usize,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
}

impl ModelConfig {
    /// Paper-scale dimensions for a given vocabulary.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_history: default_d_history(),
            d_caption: default_d_caption(),
            d_token: default_d_token(),
            d_visual: default_d_visual(),
            regions: default_regions(),
            frames: default_frames(),
            d_audio: default_d_audio(),
            d_score: default_d_score(),
            unary_hidden: default_unary_hidden(),
            max_decode_len: default_max_decode(),
            init_seed: default_init_seed(),
        }
    }

    /// Minimal widths for closed-form parameter accounting and gradient
    /// checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_history: 4,
            d_caption: 4,
            d_token: 4,
            d_visual: 4,
            regions: 2,
            frames: 4,
            d_audio: 4,
            d_score: 4,
            unary_hidden: 4,
            max_decode_len: 8,
            init_seed: 1,
        }
    }
}

/// The Table 3 configuration axes that change the computation graph without
/// changing parameter shapes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(default)]
    pub no_caption: bool,
    #[serde(default)]
    pub no_audio: bool,
    #[serde(default)]
    pub no_his_for_a: bool,
    #[serde(default)]
    pub no_init: bool,
}

/// Which history path A-BOT's decoder context uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Mm,
    Im,
}

/// What Q-BOT can see: start frame, end frame. Nothing else fits in here.
#[derive(Clone, Debug)]
pub struct QBotInput {
    pub start: Array2<f64>,
    pub end: Array2<f64>,
}

impl QBotInput {
    pub fn from_features(f: &FeatureSet) -> Self {
        let frames = f.visual.shape()[0];
        let grab = |idx: usize| {
            let v = f.visual.index_axis(ndarray::Axis(0), idx);
            v.mapv(|x| x as f64)
        };
        QBotInput { start: grab(0), end: grab(frames - 1) }
    }
}

/// What A-BOT can see: audio, all frames, and the caption text.
#[derive(Clone, Debug)]
pub struct ABotInput {
    pub audio: Array1<f64>,
    pub frames: Vec<Array2<f64>>,
    pub caption: String,
}

impl ABotInput {
    pub fn from_features(f: &FeatureSet, caption: &str) -> Self {
        let frames = (0..f.visual.shape()[0])
            .map(|i| f.visual.index_axis(ndarray::Axis(0), i).mapv(|x| x as f64))
            .collect();
        ABotInput {
            audio: f.audio.mapv(|x| x as f64),
            frames,
            caption: caption.to_string(),
        }
    }
}

/// How a decoder is driven.
pub enum Decode<'a> {
    /// Ground-truth targets; per-step logits are produced for the
    /// cross-entropy terms.
    Teacher(&'a TokenMatrix),
    Greedy,
    Beam(usize),
}

/// Decoder output. Teacher forcing fills `step_logits` (aligned with
/// target positions 1..); the sampling modes fill `tokens`.
pub struct SeqOut {
    pub tokens: Vec<Vec<usize>>,
    pub step_logits: Vec<T>,
    /// Per-example sequence embedding `[batch, d_history]`.
    pub embedding: T,
}

/// LSTM decoder with the attended context concatenated to the token
/// embedding at every step.
pub struct Decoder {
    pub table: TokenTable,
    pub ctx_proj: Linear,
    pub cell: LstmCell,
    pub out: Linear,
    pub seq_proj: Linear,
    pub hidden: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        init: &mut Init,
        name: &str,
        vocab: usize,
        d_token: usize,
        d_ctx_in: usize,
        hidden: usize,
        d_seq: usize,
    ) -> Self {
        Decoder {
            table: TokenTable::new(params, init, &format!("{name}.emb"), vocab, d_token),
            ctx_proj: Linear::new(params, init, &format!("{name}.ctx"), d_ctx_in, hidden),
            cell: LstmCell::new(params, init, &format!("{name}.lstm"), d_token + hidden, hidden),
            out: Linear::new(params, init, &format!("{name}.out"), hidden, vocab),
            seq_proj: Linear::new(params, init, &format!("{name}.seq"), hidden, d_seq),
            hidden,
        }
    }

    fn project_ctx(&self, tape: &mut Tape, params: &Params, ctx: T) -> T {
        let c = self.ctx_proj.apply(tape, params, ctx);
        tape.tanh(c)
    }

    fn initial_state(&self, tape: &mut Tape, batch: usize, init: Option<(T, T)>) -> (T, T) {
        init.unwrap_or_else(|| self.cell.zero_state(tape, batch))
    }

    /// Teacher-forced pass: feed target tokens 0..n-2, predict 1..n-1.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        params: &Params,
        ctx: T,
        init: Option<(T, T)>,
        target: &TokenMatrix,
    ) -> SeqOut {
        let batch = target.batch();
        assert!(target.width >= 2, "decoder target needs <sos> and <eos>");
        let ctx_p = self.project_ctx(tape, params, ctx);
        let mut state = self.initial_state(tape, batch, init);
        let mut step_logits = Vec::with_capacity(target.width - 1);
        for t in 0..target.width - 1 {
            let mask = Arc::new(target.valid_mask(t));
            let x = self.table.embed(tape, params, &target.column(t));
            let inp = tape.concat_cols(&[x, ctx_p]);
            state = self.cell.step(tape, params, inp, state, Some(&mask));
            step_logits.push(self.out.apply(tape, params, state.0));
        }
        let embedding = self.seq_proj.apply(tape, params, state.0);
        SeqOut { tokens: Vec::new(), step_logits, embedding }
    }

    /// Greedy decoding from `<sos>`; stops per row at `<eos>` or after
    /// `max_len` tokens. Argmax skips the structural `<pad>`/`<sos>` ids and
    /// breaks ties toward the lowest id.
    pub fn greedy(
        &self,
        tape: &mut Tape,
        params: &Params,
        ctx: T,
        init: Option<(T, T)>,
        max_len: usize,
    ) -> SeqOut {
        let batch = tape.value(ctx).nrows();
        let ctx_p = self.project_ctx(tape, params, ctx);
        let mut state = self.initial_state(tape, batch, init);
        let mut prev = vec![SOS_ID; batch];
        let mut finished = vec![false; batch];
        let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); batch];
        for _ in 0..max_len {
            let mask = Arc::new(
                finished.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect::<Vec<f64>>(),
            );
            let ids: Vec<usize> =
                prev.iter().zip(&finished).map(|(&p, &f)| if f { PAD_ID } else { p }).collect();
            let x = self.table.embed(tape, params, &ids);
            let inp = tape.concat_cols(&[x, ctx_p]);
            state = self.cell.step(tape, params, inp, state, Some(&mask));
            let logits = self.out.apply(tape, params, state.0);
            let lv = tape.value(logits);
            for i in 0..batch {
                if finished[i] {
                    continue;
                }
                let mut best = EOS_ID;
                let mut best_v = f64::NEG_INFINITY;
                for j in 0..lv.ncols() {
                    if j == PAD_ID || j == SOS_ID {
                        continue;
                    }
                    if lv[[i, j]] > best_v {
                        best_v = lv[[i, j]];
                        best = j;
                    }
                }
                tokens[i].push(best);
                prev[i] = best;
                if best == EOS_ID {
                    finished[i] = true;
                }
            }
            if finished.iter().all(|&f| f) {
                break;
            }
        }
        let embedding = self.seq_proj.apply(tape, params, state.0);
        SeqOut { tokens, step_logits: Vec::new(), embedding }
    }

    /// Beam search for a single example (`ctx` is `[1, d]`). No length
    /// normalization, so `beam(1)` reproduces greedy decoding.
    pub fn beam(
        &self,
        tape: &mut Tape,
        params: &Params,
        ctx: T,
        init: Option<(T, T)>,
        max_len: usize,
        width: usize,
    ) -> Result<Vec<usize>, AgentError> {
        if width < 1 {
            return Err(AgentError::BadBeamWidth);
        }
        assert_eq!(tape.value(ctx).nrows(), 1, "beam decoding is per-example");
        let ctx_p = self.project_ctx(tape, params, ctx);
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            state: (T, T),
            done: bool,
        }
        let s0 = self.initial_state(tape, 1, init);
        let mut beam = vec![Hyp { tokens: Vec::new(), score: 0.0, state: s0, done: false }];
        for _ in 0..max_len {
            if beam.iter().all(|h| h.done) {
                break;
            }
            let mut candidates: Vec<Hyp> = Vec::new();
            for h in &beam {
                if h.done {
                    candidates.push(Hyp {
                        tokens: h.tokens.clone(),
                        score: h.score,
                        state: h.state,
                        done: true,
                    });
                    continue;
                }
                let prev = *h.tokens.last().unwrap_or(&SOS_ID);
                let x = self.table.embed(tape, params, &[prev]);
                let inp = tape.concat_cols(&[x, ctx_p]);
                let state = self.cell.step(tape, params, inp, h.state, None);
                let logits = self.out.apply(tape, params, state.0);
                // log-softmax over the row
                let lv = tape.value(logits);
                let mx = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = lv.iter().map(|v| (v - mx).exp()).sum();
                let lz = mx + z.ln();
                for j in 0..lv.ncols() {
                    if j == PAD_ID || j == SOS_ID {
                        continue;
                    }
                    let mut tokens = h.tokens.clone();
                    tokens.push(j);
                    candidates.push(Hyp {
                        tokens,
                        score: h.score + (lv[[0, j]] - lz),
                        state,
                        done: j == EOS_ID,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(width);
            beam = candidates;
        }
        Ok(beam.into_iter().next().expect("non-empty beam").tokens)
    }
}

/// Attended vectors from Q-BOT's attention pass.
#[derive(Clone)]
pub struct QAttended {
    pub start: Attended,
    pub end: Attended,
    pub history: Attended,
}

/// Attended vectors from A-BOT's attention pass.
#[derive(Clone)]
pub struct AAttended {
    pub audio: Option<Attended>,
    pub frames: Vec<Attended>,
    pub caption: Option<Attended>,
    pub history: Option<Attended>,
}

/// Projected Q-BOT feature nodes; `*_raw` are the unprojected inputs, kept
/// addressable so tests can probe gradients at the inputs themselves.
pub struct QFeats {
    pub start_raw: T,
    pub end_raw: T,
    pub start: T,
    pub end: T,
}

pub struct AFeats {
    pub audio_raw: T,
    pub frames_raw: Vec<T>,
    /// `[batch, d_audio]`, projected; `None` under the no-audio ablation.
    pub audio: Option<T>,
    /// Per frame `[batch * regions, d_visual]`, projected.
    pub frames: Vec<T>,
    /// Encoded caption; `None` under the no-caption ablation.
    pub caption: Option<EncodedSeq>,
}

pub struct QSession {
    pub feats: QFeats,
    mm: MmSession,
    pub batch: usize,
}

pub struct ASession {
    pub feats: AFeats,
    mm: MmSession,
    pub batch: usize,
}

/// The full two-agent model. Q-BOT and A-BOT own separate attention and
/// decoder parameters; only the history encoder is shared.
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub history_enc: HistoryEncoder,
    pub caption_enc: CaptionEncoder,
    pub q_vis: Linear,
    pub a_proj: FeatureProjector,
    pub q_mm: MmAttention,
    pub a_mm: MmAttention,
    pub a_im: ImAttention,
    pub av_in_aud: Linear,
    pub av_in_vis: Linear,
    pub visual_cell: LstmCell,
    pub av_cell: LstmCell,
    pub q_dec: Decoder,
    pub a_dec: Decoder,
    pub s_dec: Decoder,
    pub pair_proj: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Self {
        assert_eq!(config.frames, 4, "the architecture is built for 4 sampled frames");
        let mut params = Params::new();
        let mut init = Init::new(config.init_seed);
        let v = config.vocab_size;
        let (dh, dc, dv, da) = (config.d_history, config.d_caption, config.d_visual, config.d_audio);

        let history_enc = HistoryEncoder::with_dims(
            &mut params,
            &mut init,
            "shared.history",
            v,
            config.d_token,
            dh,
        );
        let caption_enc = CaptionEncoder::with_dims(&mut params, &mut init, "abot.caption", v, dc);
        let q_vis = Linear::new(&mut params, &mut init, "qbot.vis", dv, dv);
        let a_proj = FeatureProjector::new(&mut params, &mut init, "abot.proj", dv, da);
        let q_mm = MmAttention::new(
            &mut params,
            &mut init,
            "qbot.mm",
            &[("start", dv), ("end", dv), ("history", dh)],
            config.d_score,
            config.unary_hidden,
        );
        let a_mm = MmAttention::new(
            &mut params,
            &mut init,
            "abot.mm",
            &[
                ("audio", da),
                ("frame0", dv),
                ("frame1", dv),
                ("frame2", dv),
                ("frame3", dv),
                ("caption", dc),
                ("history", dh),
            ],
            config.d_score,
            config.unary_hidden,
        );
        let a_im = ImAttention::new(&mut params, &mut init, "abot.im", dc + dh, dh);
        let av_in_aud = Linear::new(&mut params, &mut init, "abot.av_in_aud", da, dh);
        let av_in_vis = Linear::new(&mut params, &mut init, "abot.av_in_vis", dv, dh);
        let visual_cell = LstmCell::new(&mut params, &mut init, "qbot.visual_lstm", dv, dh);
        let av_cell = LstmCell::new(&mut params, &mut init, "abot.av_lstm", dh, dh);
        let q_dec = Decoder::new(&mut params, &mut init, "qbot.qdec", v, config.d_token, dh, dh, dh);
        let a_dec =
            Decoder::new(&mut params, &mut init, "abot.adec", v, config.d_token, dh + dc + dh, dh, dh);
        let s_dec = Decoder::new(&mut params, &mut init, "qbot.sdec", v, config.d_token, dh, dh, dh);
        let pair_proj = Linear::new(&mut params, &mut init, "shared.pair", 2 * dh, dh);
        Model {
            config,
            params,
            history_enc,
            caption_enc,
            q_vis,
            a_proj,
            q_mm,
            a_mm,
            a_im,
            av_in_aud,
            av_in_vis,
            visual_cell,
            av_cell,
            q_dec,
            a_dec,
            s_dec,
            pair_proj,
        }
    }

    /// Total trainable parameter count.
    pub fn count_parameters(&self) -> usize {
        self.params.count_elements()
    }

    pub fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    /// Load Q-BOT feature inputs onto the tape and project them.
    /// Entity layout: `[batch * regions, d_visual]` per frame.
    pub fn q_feats(&self, tape: &mut Tape, inputs: &[QBotInput]) -> QFeats {
        let r = self.config.regions;
        let dv = self.config.d_visual;
        let b = inputs.len();
        let stack = |get: &dyn Fn(&QBotInput) -> &Array2<f64>| {
            let mut m = Array2::<f64>::zeros((b * r, dv));
            for (i, input) in inputs.iter().enumerate() {
                m.slice_mut(ndarray::s![i * r..(i + 1) * r, ..]).assign(get(input));
            }
            m
        };
        let start_raw = tape.constant(stack(&|q| &q.start));
        let end_raw = tape.constant(stack(&|q| &q.end));
        let start = {
            let y = self.q_vis.apply(tape, &self.params, start_raw);
            tape.tanh(y)
        };
        let end = {
            let y = self.q_vis.apply(tape, &self.params, end_raw);
            tape.tanh(y)
        };
        QFeats { start_raw, end_raw, start, end }
    }

    /// Load A-BOT feature inputs onto the tape, project them, and encode the
    /// captions. Ablated modalities stay on the tape unprojected (so their
    /// zero gradient is observable) but enter no further computation.
    pub fn a_feats(
        &self,
        tape: &mut Tape,
        inputs: &[ABotInput],
        captions: &TokenMatrix,
        ablation: Ablation,
    ) -> Result<AFeats, AgentError> {
        let r = self.config.regions;
        let dv = self.config.d_visual;
        let da = self.config.d_audio;
        let b = inputs.len();
        let mut audio_m = Array2::<f64>::zeros((b, da));
        for (i, input) in inputs.iter().enumerate() {
            audio_m.row_mut(i).assign(&input.audio);
        }
        let audio_raw = tape.constant(audio_m);
        let mut frames_raw = Vec::with_capacity(self.config.frames);
        for f in 0..self.config.frames {
            let mut m = Array2::<f64>::zeros((b * r, dv));
            for (i, input) in inputs.iter().enumerate() {
                m.slice_mut(ndarray::s![i * r..(i + 1) * r, ..]).assign(&input.frames[f]);
            }
            frames_raw.push(tape.constant(m));
        }
        let audio = if ablation.no_audio {
            None
        } else {
            Some(self.a_proj.project_audio(tape, &self.params, audio_raw))
        };
        let frames = frames_raw
            .iter()
            .map(|&fr| self.a_proj.project_visual(tape, &self.params, fr))
            .collect();
        let caption = if ablation.no_caption {
            None
        } else {
            Some(self.caption_enc.encode(tape, &self.params, captions)?)
        };
        Ok(AFeats { audio_raw, frames_raw, audio, frames, caption })
    }

    /// Build Q-BOT's per-dialog attention session (static modalities).
    pub fn q_session(&self, tape: &mut Tape, feats: QFeats, batch: usize) -> Result<QSession, AgentError> {
        let r = self.config.regions;
        let mm = self.q_mm.session(
            tape,
            &self.params,
            vec![
                Some(ModalityInput { entities: feats.start, n: r, mask: None }),
                Some(ModalityInput { entities: feats.end, n: r, mask: None }),
            ],
        )?;
        Ok(QSession { feats, mm, batch })
    }

    /// Build A-BOT's per-dialog attention session.
    pub fn a_session(&self, tape: &mut Tape, feats: AFeats, batch: usize) -> Result<ASession, AgentError> {
        let r = self.config.regions;
        let mut statics: Vec<Option<ModalityInput>> = Vec::with_capacity(6);
        statics.push(
            feats
                .audio
                .map(|a| ModalityInput { entities: a, n: 1, mask: None }),
        );
        for &fr in &feats.frames {
            statics.push(Some(ModalityInput { entities: fr, n: r, mask: None }));
        }
        statics.push(feats.caption.as_ref().map(|c| ModalityInput {
            entities: c.entities,
            n: c.n,
            mask: Some(Arc::clone(&c.mask)),
        }));
        let mm = self.a_mm.session(tape, &self.params, statics)?;
        Ok(ASession { feats, mm, batch })
    }

    fn history_input(h: &EncodedSeq) -> ModalityInput {
        ModalityInput { entities: h.entities, n: h.n, mask: Some(Arc::clone(&h.mask)) }
    }

    /// Q-BOT's attention pass for one round.
    pub fn q_attend(
        &self,
        tape: &mut Tape,
        session: &QSession,
        history: &EncodedSeq,
    ) -> Result<QAttended, AgentError> {
        let mut out = self.q_mm.session_attend(
            tape,
            &self.params,
            &session.mm,
            Some(Self::history_input(history)),
        )?;
        let history = out.pop().unwrap().expect("history present");
        let end = out.pop().unwrap().expect("end frame present");
        let start = out.pop().unwrap().expect("start frame present");
        Ok(QAttended { start, end, history })
    }

    /// A-BOT's attention pass for one round. `history` may be withheld
    /// under the no-his-for-A ablation.
    pub fn a_attend(
        &self,
        tape: &mut Tape,
        session: &ASession,
        history: Option<&EncodedSeq>,
    ) -> Result<AAttended, AgentError> {
        let mut out = self.a_mm.session_attend(
            tape,
            &self.params,
            &session.mm,
            history.map(Self::history_input),
        )?;
        let history = out.pop().unwrap();
        let caption = out.pop().unwrap();
        let frames = out
            .drain(1..)
            .map(|a| a.expect("frames always present"))
            .collect();
        let audio = out.pop().unwrap();
        Ok(AAttended { audio, frames, caption, history })
    }

    /// Two-step LSTM over the attended start and end frame embeddings.
    pub fn visual_lstm(&self, tape: &mut Tape, a_start: T, a_end: T) -> (T, T) {
        let b = tape.value(a_start).nrows();
        let mut state = self.visual_cell.zero_state(tape, b);
        for x in [a_start, a_end] {
            state = self.visual_cell.step(tape, &self.params, x, state, None);
        }
        state
    }

    /// Five-step LSTM: attended audio first, then the 4 attended frames,
    /// each projected to the hidden width.
    pub fn audiovisual_lstm(
        &self,
        tape: &mut Tape,
        a_audio: Option<T>,
        a_frames: &[T],
    ) -> Result<(T, T), AgentError> {
        if a_frames.len() != self.config.frames {
            return Err(AgentError::FrameCount {
                found: a_frames.len(),
                expected: self.config.frames,
            });
        }
        let b = tape.value(a_frames[0]).nrows();
        let mut state = self.av_cell.zero_state(tape, b);
        let x0 = match a_audio {
            Some(a) => self.av_in_aud.apply(tape, &self.params, a),
            // ablated audio contributes a zero step, keeping sequence length d+1
            None => tape.constant(Array2::zeros((b, self.config.d_history))),
        };
        state = self.av_cell.step(tape, &self.params, x0, state, None);
        for &fr in a_frames {
            let x = self.av_in_vis.apply(tape, &self.params, fr);
            state = self.av_cell.step(tape, &self.params, x, state, None);
        }
        Ok(state)
    }

    fn zeros(&self, tape: &mut Tape, batch: usize, d: usize) -> T {
        tape.constant(Array2::zeros((batch, d)))
    }

    /// One Q-BOT question turn: attend, run the visual LSTM, decode.
    /// Returns the decoder output (with `embedding` = r_q) and the attended
    /// bundle for cache bookkeeping.
    pub fn qbot_ask(
        &self,
        tape: &mut Tape,
        session: &QSession,
        history: &EncodedSeq,
        decode: Decode,
        ablation: Ablation,
    ) -> Result<(SeqOut, QAttended), AgentError> {
        let att = self.q_attend(tape, session, history)?;
        let out = self.q_decode_with(tape, session, &att, decode, ablation, &self.q_dec)?;
        Ok((out, att))
    }

    /// Decode from a (possibly cached) Q-side attended bundle.
    pub fn q_decode_with(
        &self,
        tape: &mut Tape,
        _session: &QSession,
        att: &QAttended,
        decode: Decode,
        ablation: Ablation,
        decoder: &Decoder,
    ) -> Result<SeqOut, AgentError> {
        let state = self.visual_lstm(tape, att.start.vector, att.end.vector);
        let init = if ablation.no_init { None } else { Some(state) };
        let ctx = att.history.vector;
        Ok(match decode {
            Decode::Teacher(target) => decoder.teacher_forced(tape, &self.params, ctx, init, target),
            Decode::Greedy => {
                decoder.greedy(tape, &self.params, ctx, init, self.config.max_decode_len)
            }
            Decode::Beam(k) => {
                let tokens = decoder.beam(tape, &self.params, ctx, init, self.config.max_decode_len, k)?;
                let b = tape.value(ctx).nrows();
                let emb = self.zeros(tape, b, self.config.d_history);
                SeqOut { tokens: vec![tokens], step_logits: Vec::new(), embedding: emb }
            }
        })
    }

    /// One A-BOT answer turn. `r_q` is the question embedding from Q-BOT's
    /// decoder; the answer context is concat(attended history, attended
    /// caption, r_q), with ablated segments zeroed.
    #[allow(clippy::too_many_arguments)]
    pub fn abot_answer(
        &self,
        tape: &mut Tape,
        session: &ASession,
        history: Option<&EncodedSeq>,
        r_q: T,
        mode: AttentionMode,
        decode: Decode,
        ablation: Ablation,
    ) -> Result<(SeqOut, AAttended), AgentError> {
        let history = if ablation.no_his_for_a { None } else { history };
        let att = self.a_attend(tape, session, history)?;
        let out = self.a_decode_with(tape, session, &att, history, r_q, mode, decode, ablation)?;
        Ok((out, att))
    }

    /// Decode an answer from a (possibly cached) attended bundle.
    #[allow(clippy::too_many_arguments)]
    pub fn a_decode_with(
        &self,
        tape: &mut Tape,
        session: &ASession,
        att: &AAttended,
        history: Option<&EncodedSeq>,
        r_q: T,
        mode: AttentionMode,
        decode: Decode,
        ablation: Ablation,
    ) -> Result<SeqOut, AgentError> {
        let b = session.batch;
        let (dh, dc) = (self.config.d_history, self.config.d_caption);
        let state = self.audiovisual_lstm(
            tape,
            att.audio.as_ref().map(|a| a.vector),
            &att.frames.iter().map(|f| f.vector).collect::<Vec<_>>(),
        )?;
        let init = if ablation.no_init { None } else { Some(state) };
        let a_cap = match &att.caption {
            Some(c) => c.vector,
            None => self.zeros(tape, b, dc),
        };
        let a_his = match (history, mode) {
            (None, _) => self.zeros(tape, b, dh),
            (Some(_), AttentionMode::Mm) => {
                att.history.as_ref().expect("history attended under MM").vector
            }
            (Some(h), AttentionMode::Im) => {
                let query = tape.concat_cols(&[a_cap, r_q]);
                let (ctx, _w) =
                    self.a_im.attend(tape, &self.params, query, h.entities, h.n)?;
                ctx
            }
        };
        let ctx = tape.concat_cols(&[a_his, a_cap, r_q]);
        Ok(match decode {
            Decode::Teacher(target) => {
                self.a_dec.teacher_forced(tape, &self.params, ctx, init, target)
            }
            Decode::Greedy => {
                self.a_dec.greedy(tape, &self.params, ctx, init, self.config.max_decode_len)
            }
            Decode::Beam(k) => {
                let tokens =
                    self.a_dec.beam(tape, &self.params, ctx, init, self.config.max_decode_len, k)?;
                let emb = self.zeros(tape, b, dh);
                SeqOut { tokens: vec![tokens], step_logits: Vec::new(), embedding: emb }
            }
        })
    }

    /// Combine a question and answer embedding into the new pair embedding
    /// r_p.
    pub fn pair_embedding(&self, tape: &mut Tape, r_q: T, r_a: T) -> T {
        let cat = tape.concat_cols(&[r_q, r_a]);
        let p = self.pair_proj.apply(tape, &self.params, cat);
        tape.tanh(p)
    }

    /// Q-BOT's final description. Requires the full 10-pair history unless
    /// `bypass_history_check` is set (the basic baseline describes from the
    /// null history).
    pub fn qbot_describe(
        &self,
        tape: &mut Tape,
        session: &QSession,
        history: &EncodedSeq,
        decode: Decode,
        ablation: Ablation,
        bypass_history_check: bool,
    ) -> Result<SeqOut, AgentError> {
        if !bypass_history_check && history.n != ROUNDS {
            return Err(AgentError::HistoryIncomplete(history.n));
        }
        let att = self.q_attend(tape, session, history)?;
        self.q_decode_with(tape, session, &att, decode, ablation, &self.s_dec)
    }
}

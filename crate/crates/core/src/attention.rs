//! The two attention mechanisms: multi-modal (MM) attention producing one
//! attended vector per modality, and intra-modal (IM) softmax attention
//! between the dialog history and a textual query.
//!
//! MM attention keeps the unary + pairwise factor structure: per entity, a
//! small two-layer perceptron gives a unary score, and one bilinear map per
//! ordered modality pair scores the entity against the mean-pooled embedding
//! of every other modality. Mixed widths are handled by per-modality linear
//! projections into a shared scoring space. Dot scores are scaled by
//! `1/sqrt(d_score)`.

use crate::nn::{Init, Linear, Mlp, ParamId, Params};
use crate::tensor::{Tape, T};
use ndarray::Array2;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("bundle has {found} modalities, attention was built for {expected}")]
    ModalityCount { found: usize, expected: usize },
    #[error("modality {name}: entity width {found} does not match configured width {expected}")]
    WidthMismatch { name: String, found: usize, expected: usize },
    #[error("modality {name}: entity rows {rows} not divisible by entity count {n}")]
    RowCount { name: String, rows: usize, n: usize },
    #[error("empty history: intra-modal attention needs at least one key")]
    EmptyHistory,
}

/// One member of a modality bundle: `entities` in `[batch * n, width]`
/// layout plus an optional `[batch, n]` validity mask.
pub struct ModalityInput {
    pub entities: T,
    pub n: usize,
    pub mask: Option<Arc<Array2<f64>>>,
}

/// Attended vector `[batch, width]` and simplex weights `[batch, n]` for one
/// modality.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub vector: T,
    pub weights: T,
}

pub struct MmAttention {
    names: Vec<String>,
    widths: Vec<usize>,
    score_proj: Vec<Linear>,
    unary: Vec<Mlp>,
    /// `pairwise[m][m']` scores modality `m` entities against pooled `m'`.
    pairwise: Vec<Vec<Option<ParamId>>>,
    pub d_score: usize,
}

impl MmAttention {
    pub fn new(
        params: &mut Params,
        init: &mut Init,
        name: &str,
        modalities: &[(&str, usize)],
        d_score: usize,
        unary_hidden: usize,
    ) -> Self {
        let k = modalities.len();
        let mut score_proj = Vec::with_capacity(k);
        let mut unary = Vec::with_capacity(k);
        for (m, width) in modalities {
            score_proj.push(Linear::new(params, init, &format!("{name}.{m}.proj"), *width, d_score));
            unary.push(Mlp::new(params, init, &format!("{name}.{m}.unary"), d_score, unary_hidden, 1));
        }
        let mut pairwise = vec![vec![None; k]; k];
        for (mi, (m, _)) in modalities.iter().enumerate() {
            for (oi, (o, _)) in modalities.iter().enumerate() {
                if mi != oi {
                    pairwise[mi][oi] = Some(params.register(
                        &format!("{name}.pair.{m}.{o}"),
                        init.xavier(d_score, d_score),
                    ));
                }
            }
        }
        MmAttention {
            names: modalities.iter().map(|(m, _)| m.to_string()).collect(),
            widths: modalities.iter().map(|(_, w)| *w).collect(),
            score_proj,
            unary,
            pairwise,
            d_score,
        }
    }

    pub fn modality_count(&self) -> usize {
        self.names.len()
    }

    fn check(&self, tape: &Tape, inputs: &[ModalityInput]) -> Result<(), AttentionError> {
        if inputs.len() != self.names.len() {
            return Err(AttentionError::ModalityCount { found: inputs.len(), expected: self.names.len() });
        }
        for (idx, input) in inputs.iter().enumerate() {
            let v = tape.value(input.entities);
            if v.ncols() != self.widths[idx] {
                return Err(AttentionError::WidthMismatch {
                    name: self.names[idx].clone(),
                    found: v.ncols(),
                    expected: self.widths[idx],
                });
            }
            if input.n == 0 || v.nrows() % input.n != 0 {
                return Err(AttentionError::RowCount {
                    name: self.names[idx].clone(),
                    rows: v.nrows(),
                    n: input.n,
                });
            }
        }
        Ok(())
    }

    /// Project one modality and compute its per-entity unary scores and its
    /// masked mean pool in scoring space.
    fn project(&self, tape: &mut Tape, params: &Params, idx: usize, input: &ModalityInput) -> Projected {
        let batch = tape.value(input.entities).nrows() / input.n;
        let u = self.score_proj[idx].apply(tape, params, input.entities);
        let pooled = tape.mean_pool_groups(u, input.n, input.mask.clone());
        let unary_flat = self.unary[idx].apply(tape, params, u);
        let unary = tape.reshape(unary_flat, batch, input.n);
        Projected { u, pooled, unary }
    }

    fn finish_modality(
        &self,
        tape: &mut Tape,
        input: &ModalityInput,
        proj: &Projected,
        pair_sum: Option<T>,
    ) -> Attended {
        let scores = match pair_sum {
            Some(ps) => {
                let dots = tape.rows_dot_bcast(proj.u, ps, input.n);
                let dots = tape.scale(dots, 1.0 / (self.d_score as f64).sqrt());
                tape.add(proj.unary, dots)
            }
            None => proj.unary,
        };
        let weights = tape.softmax_rows(scores, input.mask.clone());
        let vector = tape.weighted_pool(input.entities, weights);
        Attended { vector, weights }
    }

    /// Full MM attention over a bundle: one attended vector per modality.
    pub fn attend(
        &self,
        tape: &mut Tape,
        params: &Params,
        inputs: &[ModalityInput],
    ) -> Result<Vec<Attended>, AttentionError> {
        self.check(tape, inputs)?;
        let projected: Vec<Projected> =
            (0..inputs.len()).map(|i| self.project(tape, params, i, &inputs[i])).collect();
        let mut out = Vec::with_capacity(inputs.len());
        for m in 0..inputs.len() {
            let mut pair_sum: Option<T> = None;
            for o in 0..inputs.len() {
                let Some(b_id) = self.pairwise[m][o] else { continue };
                let b = params.on(tape, b_id);
                let t = tape.matmul(projected[o].pooled, b);
                pair_sum = Some(match pair_sum {
                    Some(acc) => tape.add(acc, t),
                    None => t,
                });
            }
            out.push(self.finish_modality(tape, &inputs[m], &projected[m], pair_sum));
        }
        Ok(out)
    }

    /// Precompute everything that does not depend on the last (dynamic)
    /// modality; the session then re-attends cheaply as the dynamic modality
    /// (the dialog history) changes round to round. A `None` slot excludes
    /// that modality from the computation entirely (ablations).
    pub fn session(
        &self,
        tape: &mut Tape,
        params: &Params,
        static_inputs: Vec<Option<ModalityInput>>,
    ) -> Result<MmSession, AttentionError> {
        assert_eq!(static_inputs.len() + 1, self.names.len(), "dynamic modality must be last");
        let n_static = static_inputs.len();
        for (idx, input) in static_inputs.iter().enumerate() {
            let Some(input) = input else { continue };
            let v = tape.value(input.entities);
            if v.ncols() != self.widths[idx] {
                return Err(AttentionError::WidthMismatch {
                    name: self.names[idx].clone(),
                    found: v.ncols(),
                    expected: self.widths[idx],
                });
            }
        }
        let projected: Vec<Option<Projected>> = (0..n_static)
            .map(|i| static_inputs[i].as_ref().map(|input| self.project(tape, params, i, input)))
            .collect();
        let mut static_pair_sums = Vec::with_capacity(n_static);
        for m in 0..n_static {
            if projected[m].is_none() {
                static_pair_sums.push(None);
                continue;
            }
            let mut acc: Option<T> = None;
            for o in 0..n_static {
                let Some(proj_o) = &projected[o] else { continue };
                let Some(b_id) = self.pairwise[m][o] else { continue };
                let b = params.on(tape, b_id);
                let t = tape.matmul(proj_o.pooled, b);
                acc = Some(match acc {
                    Some(a) => tape.add(a, t),
                    None => t,
                });
            }
            static_pair_sums.push(acc);
        }
        Ok(MmSession { static_inputs, projected, static_pair_sums })
    }

    /// Attend with the dynamic modality supplied; output order matches the
    /// constructor's modality order (dynamic last). Excluded modalities
    /// yield `None` in the result.
    pub fn session_attend(
        &self,
        tape: &mut Tape,
        params: &Params,
        session: &MmSession,
        dynamic: Option<ModalityInput>,
    ) -> Result<Vec<Option<Attended>>, AttentionError> {
        let dyn_idx = self.names.len() - 1;
        let dyn_proj = match &dynamic {
            Some(input) => {
                let v = tape.value(input.entities);
                if v.ncols() != self.widths[dyn_idx] {
                    return Err(AttentionError::WidthMismatch {
                        name: self.names[dyn_idx].clone(),
                        found: v.ncols(),
                        expected: self.widths[dyn_idx],
                    });
                }
                Some(self.project(tape, params, dyn_idx, input))
            }
            None => None,
        };
        let mut out = Vec::with_capacity(self.names.len());
        for m in 0..dyn_idx {
            let (Some(input), Some(proj)) = (&session.static_inputs[m], &session.projected[m]) else {
                out.push(None);
                continue;
            };
            let mut pair_sum = session.static_pair_sums[m];
            if let Some(dp) = &dyn_proj {
                let b_id = self.pairwise[m][dyn_idx].expect("off-diagonal");
                let b = params.on(tape, b_id);
                let t = tape.matmul(dp.pooled, b);
                pair_sum = Some(match pair_sum {
                    Some(acc) => tape.add(acc, t),
                    None => t,
                });
            }
            out.push(Some(self.finish_modality(tape, input, proj, pair_sum)));
        }
        match (dynamic, dyn_proj) {
            (Some(input), Some(proj)) => {
                // dynamic modality scored against all present static pools
                let mut acc: Option<T> = None;
                for o in 0..dyn_idx {
                    let Some(proj_o) = &session.projected[o] else { continue };
                    let b_id = self.pairwise[dyn_idx][o].expect("off-diagonal");
                    let b = params.on(tape, b_id);
                    let t = tape.matmul(proj_o.pooled, b);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, t),
                        None => t,
                    });
                }
                out.push(Some(self.finish_modality(tape, &input, &proj, acc)));
            }
            _ => out.push(None),
        }
        Ok(out)
    }
}

struct Projected {
    u: T,
    pooled: T,
    unary: T,
}

/// Cached static half of an MM attention computation.
pub struct MmSession {
    static_inputs: Vec<Option<ModalityInput>>,
    projected: Vec<Option<Projected>>,
    static_pair_sums: Vec<Option<T>>,
}

/// Intra-modal softmax attention between the history pairs and a projected
/// textual query.
pub struct ImAttention {
    pub query_proj: Linear,
    pub d_key: usize,
}

impl ImAttention {
    pub fn new(params: &mut Params, init: &mut Init, name: &str, d_query: usize, d_key: usize) -> Self {
        ImAttention {
            query_proj: Linear::new(params, init, &format!("{name}.query"), d_query, d_key),
            d_key,
        }
    }

    /// `query` is `[batch, d_query]`, `keys` are `[batch * k, d_key]`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        params: &Params,
        query: T,
        keys: T,
        k: usize,
    ) -> Result<(T, T), AttentionError> {
        if k == 0 {
            return Err(AttentionError::EmptyHistory);
        }
        let q = self.query_proj.apply(tape, params, query);
        let scores = tape.rows_dot_bcast(keys, q, k);
        let scores = tape.scale(scores, 1.0 / (self.d_key as f64).sqrt());
        let weights = tape.softmax_rows(scores, None);
        let context = tape.weighted_pool(keys, weights);
        Ok((context, weights))
    }
}

/// Identity-projection IM attention used by the operation-level contract
/// tests: softmax of scaled dot scores between a raw query and keys.
pub fn im_attend_raw(
    tape: &mut Tape,
    query: T,
    keys: T,
    k: usize,
    scale: f64,
) -> Result<(T, T), AttentionError> {
    if k == 0 {
        return Err(AttentionError::EmptyHistory);
    }
    let scores = tape.rows_dot_bcast(keys, query, k);
    let scores = tape.scale(scores, scale);
    let weights = tape.softmax_rows(scores, None);
    let context = tape.weighted_pool(keys, weights);
    Ok((context, weights))
}

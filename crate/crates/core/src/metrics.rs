//! Corpus-level description scoring (BLEU1-4, ROUGE-L, CIDEr) and report
//! assembly for the standard, strong-baseline, and no-dialog test settings.

use crate::data::{tokenize_text, DialogueRecord, FeatureStore, Vocabulary};
use crate::dialog::{
    basic_baseline_describe_batch, enumerate_strong_cases, enumerate_test_cases, run_dialog_batch,
    DialogError, DialogModes, EvalCase,
};
use crate::agents::Model;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("hypothesis and reference counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("a case has no references")]
    NoReferences,
    #[error("n-gram order {0} out of range 1..=4")]
    BadOrder(usize),
    #[error("corpus too small for CIDEr document frequencies (need >= 2 cases)")]
    CorpusTooSmall,
    #[error(transparent)]
    Dialog(#[from] DialogError),
}

fn check_corpus(hyps: &[String], refs: &[Vec<String>]) -> Result<(), MetricError> {
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(MetricError::CountMismatch(hyps.len(), refs.len()));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(MetricError::NoReferences);
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU: geometric mean of modified n-gram precisions for
/// orders 1..=n under a shared brevity penalty.
pub fn bleu_n(hyps: &[String], refs: &[Vec<String>], n: usize) -> Result<f64, MetricError> {
    check_corpus(hyps, refs)?;
    if !(1..=4).contains(&n) {
        return Err(MetricError::BadOrder(n));
    }
    let hyp_toks: Vec<Vec<String>> = hyps.iter().map(|h| tokenize_text(h)).collect();
    let ref_toks: Vec<Vec<Vec<String>>> = refs
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize_text(r)).collect())
        .collect();

    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, rs) in hyp_toks.iter().zip(&ref_toks) {
        hyp_len += h.len();
        // effective reference length: closest to the hypothesis, shorter wins ties
        let best = rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("non-empty reference list");
        ref_len += best;
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };

    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (h, rs) in hyp_toks.iter().zip(&ref_toks) {
            let hc = ngram_counts(h, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in rs {
                for (gram, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (gram, c) in &hc {
                total += c;
                clipped += (*c).min(max_ref.get(gram).copied().unwrap_or(0));
            }
        }
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: per-case LCS F-measure with beta = 1.2 (max over references),
/// averaged over the corpus.
pub fn rouge_l(hyps: &[String], refs: &[Vec<String>]) -> Result<f64, MetricError> {
    check_corpus(hyps, refs)?;
    const BETA: f64 = 1.2;
    let mut sum = 0.0;
    for (h, rs) in hyps.iter().zip(refs) {
        let h = tokenize_text(h);
        let mut best = 0.0f64;
        for r in rs {
            let r = tokenize_text(r);
            let lcs = lcs_len(&h, &r) as f64;
            if lcs == 0.0 || h.is_empty() || r.is_empty() {
                continue;
            }
            let p = lcs / h.len() as f64;
            let rec = lcs / r.len() as f64;
            let f = (1.0 + BETA * BETA) * p * rec / (rec + BETA * BETA * p);
            best = best.max(f);
        }
        sum += best;
    }
    Ok(sum / hyps.len() as f64)
}

type GramKey = Vec<String>;

fn tf_counts(tokens: &[String], n: usize) -> HashMap<GramKey, f64> {
    let mut counts: HashMap<GramKey, f64> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// CIDEr: average over n = 1..4 of TF-IDF n-gram cosine similarity between
/// the hypothesis and each reference, scaled by 10. Document frequencies
/// come from the reference corpus (one document per case).
pub fn cider(hyps: &[String], refs: &[Vec<String>]) -> Result<f64, MetricError> {
    check_corpus(hyps, refs)?;
    let cases = hyps.len();
    if cases < 2 {
        return Err(MetricError::CorpusTooSmall);
    }
    let hyp_toks: Vec<Vec<String>> = hyps.iter().map(|h| tokenize_text(h)).collect();
    let ref_toks: Vec<Vec<Vec<String>>> = refs
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize_text(r)).collect())
        .collect();
    let mut score = 0.0;
    for n in 1..=4 {
        // df[gram] = number of cases whose reference set mentions the gram
        let mut df: HashMap<GramKey, f64> = HashMap::new();
        for rs in &ref_toks {
            let mut seen: HashMap<GramKey, ()> = HashMap::new();
            for r in rs {
                for gram in tf_counts(r, n).into_keys() {
                    seen.entry(gram).or_insert(());
                }
            }
            for gram in seen.into_keys() {
                *df.entry(gram).or_insert(0.0) += 1.0;
            }
        }
        let weigh = |counts: &HashMap<GramKey, f64>| -> HashMap<GramKey, f64> {
            let total: f64 = counts.values().sum();
            counts
                .iter()
                .map(|(g, c)| {
                    let idf = (cases as f64 / df.get(g).copied().unwrap_or(0.0).max(1.0)).ln();
                    (g.clone(), c / total.max(1.0) * idf)
                })
                .collect()
        };
        let mut order_sum = 0.0;
        for (h, rs) in hyp_toks.iter().zip(&ref_toks) {
            let gh = weigh(&tf_counts(h, n));
            let nh: f64 = gh.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut case = 0.0;
            for r in rs {
                let gr = weigh(&tf_counts(r, n));
                let nr: f64 = gr.values().map(|v| v * v).sum::<f64>().sqrt();
                if nh == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = gh
                    .iter()
                    .map(|(g, v)| v * gr.get(g).copied().unwrap_or(0.0))
                    .sum();
                case += dot / (nh * nr);
            }
            order_sum += case / rs.len() as f64;
        }
        score += order_sum / cases as f64;
    }
    Ok(score / 4.0 * 10.0)
}

/// The six scores for one corpus. CIDEr is absent when the group is too
/// small for document frequencies.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: Option<f64>,
}

/// Score one aligned corpus of hypotheses against references.
pub fn score_corpus(hyps: &[String], refs: &[Vec<String>]) -> Result<MetricScores, MetricError> {
    Ok(MetricScores {
        bleu1: bleu_n(hyps, refs, 1)?,
        bleu2: bleu_n(hyps, refs, 2)?,
        bleu3: bleu_n(hyps, refs, 3)?,
        bleu4: bleu_n(hyps, refs, 4)?,
        rouge_l: rouge_l(hyps, refs)?,
        cider: if hyps.len() >= 2 { Some(cider(hyps, refs)?) } else { None },
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundScores {
    pub start_round: usize,
    pub case_count: usize,
    pub scores: MetricScores,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_count: usize,
    pub overall: MetricScores,
    pub per_round: Vec<RoundScores>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width summary: one row per start round plus an overall row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "round", "cases", "BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE-L", "CIDEr"
        );
        let row = |out: &mut String, label: &str, n: usize, s: &MetricScores| {
            let cider = s.cider.map_or("-".to_string(), |c| format!("{c:.4}"));
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
                label, n, s.bleu1, s.bleu2, s.bleu3, s.bleu4, s.rouge_l, cider
            );
        };
        for r in &self.per_round {
            row(&mut out, &r.start_round.to_string(), r.case_count, &r.scores);
        }
        row(&mut out, "overall", self.case_count, &self.overall);
        out
    }
}

/// Which test setting to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Every (video, start round) pair: 10 cases per video.
    Standard,
    /// Full ground-truth dialog, generation only of the description.
    Strong,
    /// No dialog at all: description from the static frames alone.
    Basic,
}

/// Roll out the model over a split and score the generated descriptions.
pub fn evaluate(
    model: &Model,
    records: &[DialogueRecord],
    features: &FeatureStore,
    vocab: &Vocabulary,
    modes: &DialogModes,
    mode: EvalMode,
    batch_size: usize,
) -> Result<MetricReport, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let by_id: HashMap<&str, &DialogueRecord> =
        records.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let batch_size = batch_size.max(1);

    let mut hyps: Vec<String> = Vec::new();
    let mut rounds: Vec<usize> = Vec::new();
    let mut refs: Vec<Vec<String>> = Vec::new();

    match mode {
        EvalMode::Standard | EvalMode::Strong => {
            let cases: Vec<EvalCase> = match mode {
                EvalMode::Standard => enumerate_test_cases(records),
                _ => enumerate_strong_cases(records),
            };
            for chunk in cases.chunks(batch_size) {
                let recs: Vec<DialogueRecord> = chunk
                    .iter()
                    .map(|c| (*by_id.get(c.video_id.as_str()).expect("case from split")).clone())
                    .collect();
                let starts: Vec<usize> = chunk.iter().map(|c| c.start_round).collect();
                let ts = run_dialog_batch(model, &recs, features, vocab, &starts, modes)?;
                for (t, r) in ts.iter().zip(&recs) {
                    hyps.push(t.description.clone());
                    rounds.push(t.start_round);
                    refs.push(vec![r.summary.clone()]);
                }
            }
        }
        EvalMode::Basic => {
            let mut recs: Vec<&DialogueRecord> = records.iter().collect();
            recs.sort_by(|a, b| a.video_id.cmp(&b.video_id));
            for chunk in recs.chunks(batch_size) {
                let owned: Vec<DialogueRecord> = chunk.iter().map(|r| (*r).clone()).collect();
                let ds = basic_baseline_describe_batch(model, &owned, features, vocab, modes.ablation)?;
                for (d, r) in ds.into_iter().zip(&owned) {
                    hyps.push(d);
                    rounds.push(0);
                    refs.push(vec![r.summary.clone()]);
                }
            }
        }
    }

    let overall = score_corpus(&hyps, &refs)?;
    let mut per_round = Vec::new();
    if mode == EvalMode::Standard {
        for round in 1..=crate::agents::ROUNDS {
            let idx: Vec<usize> = (0..hyps.len()).filter(|&i| rounds[i] == round).collect();
            let h: Vec<String> = idx.iter().map(|&i| hyps[i].clone()).collect();
            let r: Vec<Vec<String>> = idx.iter().map(|&i| refs[i].clone()).collect();
            per_round.push(RoundScores {
                start_round: round,
                case_count: h.len(),
                scores: score_corpus(&h, &r)?,
            });
        }
    }
    Ok(MetricReport { case_count: hyps.len(), overall, per_round })
}

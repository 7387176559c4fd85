//! End-to-end acceptance checks. One pass/fail line prints per criterion
//! (run with `--nocapture` to watch); the test fails if any criterion fails.

use ndarray::{Array1, Array3};
use qacoop_core::agents::{Ablation, Decode, Model, ModelConfig, QBotInput, ROUNDS};
use qacoop_core::attention::{im_attend_raw, MmAttention, ModalityInput};
use qacoop_core::data::{
    assign_splits, build_vocabulary, pad_batch, read_feature_file, synth_dataset, tokenize,
    tokenize_text, write_feature_file, DialogueRecord, FeatureSet, FeatureStore, Split,
    TokenMatrix, Vocabulary, ATTR_ACTIONS, ATTR_OBJECTS, ATTR_SOUNDS,
};
use qacoop_core::dialog::{
    enumerate_strong_cases, enumerate_test_cases, run_dialog_batch, shuffle_qa_pairs, DialogModes,
    UpdateMode, STRONG_BASELINE,
};
use qacoop_core::metrics;
use qacoop_core::nn::{load_checkpoint, save_checkpoint, Init, Params};
use qacoop_core::tensor::{Tape, T};
use qacoop_core::training::{loss_graph, train, TrainConfig};
use std::time::Instant;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail.to_string())
    }
}

// ---------------------------------------------------------------------------
// shared helpers

fn matrix(texts: &[&str], v: &Vocabulary) -> TokenMatrix {
    let seqs: Vec<_> = texts.iter().map(|t| tokenize(t, v)).collect();
    let width = seqs.iter().map(|s| s.length).max().unwrap();
    TokenMatrix {
        lengths: seqs.iter().map(|s| s.length).collect(),
        ids: seqs.into_iter().map(|s| s.padded(width).ids).collect(),
        width,
    }
}

fn small_config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::tiny(vocab);
    c.regions = 49;
    c.d_visual = 512;
    c.d_audio = 256;
    c.d_history = 64;
    c.d_caption = 64;
    c.d_token = 32;
    c.d_score = 32;
    c.unary_hidden = 32;
    c.max_decode_len = 24;
    c
}

fn same_tokens(a: &str, b: &str) -> bool {
    tokenize_text(a) == tokenize_text(b)
}

// ---------------------------------------------------------------------------
// criterion 1: overfit fidelity

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let corpus = synth_dataset(32, 7);
    let vocab = build_vocabulary(&corpus.records, 1).map_err(|e| e.to_string())?;
    let mut model = Model::new(ModelConfig::paper(vocab.len()));
    let cfg = TrainConfig {
        epochs: 200,
        seed: 7,
        stop_at_perplexity: Some(1.35),
        eval_every: 10,
        ..Default::default()
    };
    let report = train(&mut model, &corpus.records, &[], &corpus.features, &vocab, &cfg, None)
        .map_err(|e| e.to_string())?;
    // Verbatim generation is checked in the fully cooperative setting: the
    // agents generate all ten rounds themselves before describing.
    let starts = vec![1; corpus.records.len()];
    let transcripts = run_dialog_batch(
        &model,
        &corpus.records,
        &corpus.features,
        &vocab,
        &starts,
        &DialogModes::default(),
    )
    .map_err(|e| e.to_string())?;
    let verbatim = transcripts
        .iter()
        .zip(&corpus.records)
        .filter(|(t, r)| same_tokens(&t.description, &r.summary))
        .count();
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "perplexity {:.3} after {} epochs, {verbatim}/32 verbatim, {mins:.1} min",
        report.final_perplexity, report.epochs_run
    );
    check(report.final_perplexity < 1.5, &format!("perplexity {:.3} >= 1.5", report.final_perplexity))?;
    check(verbatim * 10 >= 32 * 9, &format!("only {verbatim}/32 verbatim ({detail})"))?;
    check(mins < 10.0, &format!("took {mins:.1} min (>= 10)"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// criteria 2 and 3 share three trained models

struct GapRun {
    coop_cider: f64,
    strong_cider: f64,
    basic_cider: f64,
    coop_recovery: [f64; 3],
    basic_recovery: [f64; 3],
}

fn train_and_probe(seed: u64) -> Result<GapRun, String> {
    let mut corpus = synth_dataset(256, seed);
    assign_splits(&mut corpus.records, 200, 0);
    let train_recs: Vec<DialogueRecord> =
        corpus.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let test_idx: Vec<usize> =
        (0..corpus.records.len()).filter(|&i| corpus.records[i].split == Split::Test).collect();
    let test_recs: Vec<DialogueRecord> =
        test_idx.iter().map(|&i| corpus.records[i].clone()).collect();
    let vocab = build_vocabulary(&train_recs, 1).map_err(|e| e.to_string())?;
    let mut model = Model::new(small_config(vocab.len()));
    let cfg = TrainConfig {
        epochs: 80,
        seed,
        eval_every: 40,
        ..Default::default()
    };
    train(&mut model, &train_recs, &[], &corpus.features, &vocab, &cfg, None)
        .map_err(|e| e.to_string())?;

    let modes = DialogModes::default();
    let refs: Vec<Vec<String>> = test_recs.iter().map(|r| vec![r.summary.clone()]).collect();

    // cooperative standard setting: all (video, start round) cases
    let cases = enumerate_test_cases(&test_recs);
    let by_id: std::collections::HashMap<&str, usize> =
        test_recs.iter().enumerate().map(|(i, r)| (r.video_id.as_str(), i)).collect();
    let mut coop_hyps = vec![Vec::new(); test_recs.len()];
    for chunk in cases.chunks(56) {
        let recs: Vec<DialogueRecord> =
            chunk.iter().map(|c| test_recs[by_id[c.video_id.as_str()]].clone()).collect();
        let starts: Vec<usize> = chunk.iter().map(|c| c.start_round).collect();
        let ts = run_dialog_batch(&model, &recs, &corpus.features, &vocab, &starts, &modes)
            .map_err(|e| e.to_string())?;
        for (t, c) in ts.iter().zip(chunk) {
            coop_hyps[by_id[c.video_id.as_str()]].push(t.description.clone());
        }
    }
    let flat_coop: Vec<String> = coop_hyps.iter().flatten().cloned().collect();
    let flat_refs: Vec<Vec<String>> = coop_hyps
        .iter()
        .enumerate()
        .flat_map(|(i, hs)| hs.iter().map(|_| refs[i].clone()).collect::<Vec<_>>())
        .collect();
    let coop_cider = metrics::cider(&flat_coop, &flat_refs).map_err(|e| e.to_string())?;

    // strong baseline: full ground-truth dialog
    let strong_cases = enumerate_strong_cases(&test_recs);
    let strong_starts: Vec<usize> = strong_cases.iter().map(|c| c.start_round).collect();
    let strong_recs: Vec<DialogueRecord> = strong_cases
        .iter()
        .map(|c| test_recs[by_id[c.video_id.as_str()]].clone())
        .collect();
    let strong_ts =
        run_dialog_batch(&model, &strong_recs, &corpus.features, &vocab, &strong_starts, &modes)
            .map_err(|e| e.to_string())?;
    let strong_hyps: Vec<String> = strong_ts.iter().map(|t| t.description.clone()).collect();
    let strong_refs: Vec<Vec<String>> = strong_recs
        .iter()
        .map(|r| vec![r.summary.clone()])
        .collect();
    let strong_cider = metrics::cider(&strong_hyps, &strong_refs).map_err(|e| e.to_string())?;

    // basic baseline: no dialog at all
    let basic_hyps = qacoop_core::dialog::basic_baseline_describe_batch(
        &model,
        &test_recs,
        &corpus.features,
        &vocab,
        Ablation::default(),
    )
    .map_err(|e| e.to_string())?;
    let basic_cider = metrics::cider(&basic_hyps, &refs).map_err(|e| e.to_string())?;

    // attribute recovery: fraction of descriptions containing the true
    // action / object / sound token (per attribute)
    let recover = |descs: &dyn Fn(usize) -> Vec<String>| -> [f64; 3] {
        let mut hits = [0usize; 3];
        let mut total = 0usize;
        for (slot, &ri) in test_idx.iter().enumerate() {
            let scene = &corpus.scenes[ri];
            let truth =
                [scene.action_token(), scene.object_token(), scene.sound_token()];
            for d in descs(slot) {
                let toks = tokenize_text(&d);
                for (k, t) in truth.iter().enumerate() {
                    if toks.iter().any(|w| w == t) {
                        hits[k] += 1;
                    }
                }
                total += 1;
            }
        }
        [0, 1, 2].map(|k| hits[k] as f64 / total as f64)
    };
    let coop_recovery = recover(&|slot| coop_hyps[slot].clone());
    let basic_recovery = recover(&|slot| vec![basic_hyps[slot].clone()]);

    Ok(GapRun { coop_cider, strong_cider, basic_cider, coop_recovery, basic_recovery })
}

fn criteria_2_3() -> (Outcome, Outcome) {
    let mut runs = Vec::new();
    for seed in [1u64, 2, 3] {
        match train_and_probe(seed) {
            Ok(r) => runs.push(r),
            Err(e) => {
                let e = format!("seed {seed}: {e}");
                return (Err(e.clone()), Err(e));
            }
        }
    }
    let gap_detail: Vec<String> = runs
        .iter()
        .map(|r| format!("(coop {:.2} / strong {:.2} / basic {:.2})", r.coop_cider, r.strong_cider, r.basic_cider))
        .collect();
    let gap_detail = format!("CIDEr per seed: {}", gap_detail.join(" "));
    let c2 = if runs.iter().all(|r| r.coop_cider > r.basic_cider)
        && runs.iter().all(|r| r.strong_cider >= r.basic_cider)
    {
        Ok(gap_detail)
    } else {
        Err(gap_detail)
    };

    // chance rate of naming the right attribute value by guessing uniformly
    let chance = [
        1.0 / ATTR_ACTIONS.len() as f64,
        1.0 / ATTR_OBJECTS.len() as f64,
        1.0 / ATTR_SOUNDS.len() as f64,
    ];
    let pooled_chance = chance.iter().sum::<f64>() / 3.0;
    let pool = |r: &[f64; 3]| r.iter().sum::<f64>() / 3.0;
    let coop = pool(&runs[0].coop_recovery);
    let basic = pool(&runs[0].basic_recovery);
    let probe_detail = format!(
        "recovery (action/object/sound): coop {:.2?}, basic {:.2?}; pooled coop {coop:.3} vs 3x chance {:.3}, pooled basic {basic:.3} vs 1.5x chance {:.3}",
        runs[0].coop_recovery,
        runs[0].basic_recovery,
        3.0 * pooled_chance,
        1.5 * pooled_chance
    );
    let c3 = if coop >= 3.0 * pooled_chance && basic <= 1.5 * pooled_chance {
        Ok(probe_detail)
    } else {
        Err(probe_detail)
    };
    (c2, c3)
}

// ---------------------------------------------------------------------------
// criterion 4: finite-difference gradient checks

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences over every entry of every parameter, compared
/// against the analytic tape gradient of `f`'s scalar output.
fn gradcheck(params: &mut Params, f: &dyn Fn(&mut Tape, &Params) -> T) -> Result<f64, String> {
    let (root, grads) = {
        let mut tape = Tape::new();
        let root = f(&mut tape, params);
        let grads = tape.backward(root, params.len());
        (tape.value(root)[[0, 0]], grads)
    };
    if !root.is_finite() {
        return Err("non-finite loss".into());
    }
    let h = 1e-4;
    let mut worst = 0.0f64;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let base = params.get(id).clone();
        let analytic = grads.param(id.0).cloned();
        for ((r, c), &v) in base.indexed_iter() {
            let mut probe = |delta: f64| -> f64 {
                let mut m = base.clone();
                m[[r, c]] = v + delta;
                params.set(id, m);
                let mut tape = Tape::new();
                let t = f(&mut tape, params);
                tape.value(t)[[0, 0]]
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            params.set(id, base.clone());
            let an = analytic.as_ref().map_or(0.0, |g| g[[r, c]]);
            if fd.abs() < 1e-8 && an.abs() < 1e-8 {
                continue;
            }
            worst = worst.max(rel_err(an, fd));
        }
    }
    Ok(worst)
}

fn criterion_4() -> Outcome {
    let mut worst_overall = 0.0f64;

    // mm_attend: three modalities with mixed entity counts
    {
        let mut params = Params::new();
        let mut init = Init::new(42);
        let mm = MmAttention::new(&mut params, &mut init, "t", &[("a", 3), ("b", 4), ("c", 2)], 5, 4);
        let ea = init.uniform(2 * 3, 3, 1.0);
        let eb = init.uniform(2 * 2, 4, 1.0);
        let ec = init.uniform(2 * 1, 2, 1.0);
        let f = |tape: &mut Tape, params: &Params| -> T {
            let inputs = vec![
                ModalityInput { entities: tape.var(ea.clone()), n: 3, mask: None },
                ModalityInput { entities: tape.var(eb.clone()), n: 2, mask: None },
                ModalityInput { entities: tape.var(ec.clone()), n: 1, mask: None },
            ];
            let att = mm.attend(tape, params, &inputs).unwrap();
            let cat = tape.concat_cols(&[att[0].vector, att[1].vector, att[2].vector]);
            let sq = tape.mul(cat, cat);
            tape.sum_all(sq)
        };
        let w = gradcheck(&mut params, &f)?;
        worst_overall = worst_overall.max(w);
    }

    // im_attend through a learned query projection
    {
        let mut params = Params::new();
        let mut init = Init::new(43);
        let im = qacoop_core::attention::ImAttention::new(&mut params, &mut init, "t", 4, 3);
        let q = init.uniform(2, 4, 1.0);
        let k = init.uniform(2 * 3, 3, 1.0);
        let f = |tape: &mut Tape, params: &Params| -> T {
            let qn = tape.var(q.clone());
            let kn = tape.var(k.clone());
            let (ctx, _) = im.attend(tape, params, qn, kn, 3).unwrap();
            let sq = tape.mul(ctx, ctx);
            tape.sum_all(sq)
        };
        let w = gradcheck(&mut params, &f)?;
        worst_overall = worst_overall.max(w);
        // and the raw scaled-dot variant w.r.t. its inputs (query already in
        // key space)
        let q = init.uniform(2, 3, 1.0);
        let mut tape = Tape::new();
        let qn = tape.var(q.clone());
        let kn = tape.var(k.clone());
        let (ctx, _) = im_attend_raw(&mut tape, qn, kn, 3, 1.0 / (3f64).sqrt()).map_err(|e| e.to_string())?;
        let sq = tape.mul(ctx, ctx);
        let root = tape.sum_all(sq);
        let grads = tape.backward(root, 0);
        let h = 1e-4;
        let analytic = grads.node(qn).unwrap().clone();
        for ((r, c), &v) in q.indexed_iter() {
            let probe = |delta: f64| -> f64 {
                let mut qq = q.clone();
                qq[[r, c]] = v + delta;
                let mut tape = Tape::new();
                let qn = tape.var(qq);
                let kn = tape.var(k.clone());
                let (ctx, _) = im_attend_raw(&mut tape, qn, kn, 3, 1.0 / (3f64).sqrt()).unwrap();
                let sq = tape.mul(ctx, ctx);
                let t = tape.sum_all(sq);
                tape.value(t)[[0, 0]]
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            worst_overall = worst_overall.max(rel_err(analytic[[r, c]], fd));
        }
    }

    // teacher-forced description generation end to end
    {
        let corpus = synth_dataset(2, 21);
        let vocab = build_vocabulary(&corpus.records, 1).map_err(|e| e.to_string())?;
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.regions = 49;
        cfg.d_visual = 512;
        cfg.d_audio = 256;
        let mut model = Model::new(cfg);
        let summaries = matrix(
            &corpus.records.iter().map(|r| r.summary.as_str()).collect::<Vec<_>>(),
            &vocab,
        );
        let q1 = matrix(&["what happens", "who is it"], &vocab);
        let a1 = matrix(&["the man jumps", "a woman"], &vocab);
        let inputs: Vec<QBotInput> = corpus
            .records
            .iter()
            .map(|r| QBotInput::from_features(corpus.features.get(&r.video_id).unwrap()))
            .collect();
        let f = |tape: &mut Tape, m: &Model| -> T {
            let pair = m.history_enc.encode_pair(tape, &m.params, &q1, &a1).unwrap();
            let mut rows = qacoop_core::dialog::HistoryRows::new();
            rows.push(pair).unwrap();
            let hist = rows.stack(tape, m, 2);
            let feats = m.q_feats(tape, &inputs);
            let session = m.q_session(tape, feats, 2).unwrap();
            let out = m
                .qbot_describe(tape, &session, &hist, Decode::Teacher(&summaries), Ablation::default(), true)
                .unwrap();
            let mut sum: Option<T> = None;
            for (t, &logits) in out.step_logits.iter().enumerate() {
                let targets = summaries.column(t + 1);
                let weights: Vec<f64> =
                    targets.iter().map(|&id| if id == 0 { 0.0 } else { 1.0 }).collect();
                let l = tape.softmax_xent(logits, &targets, &weights);
                sum = Some(match sum {
                    Some(s) => tape.add(s, l),
                    None => l,
                });
            }
            sum.unwrap()
        };
        // full FD over every entry would take hours at these dims; sample
        // a handful of entries per tensor instead
        let w = sampled_gradcheck_model(&mut model, &f, 4)?;
        worst_overall = worst_overall.max(w);
    }

    let detail = format!("max relative error {worst_overall:.2e}");
    check(worst_overall < 1e-4, &detail)?;
    Ok(detail)
}

/// Like `gradcheck` but over a full model, probing only `per_tensor`
/// entries of each parameter tensor.
fn sampled_gradcheck_model(
    model: &mut Model,
    f: &dyn Fn(&mut Tape, &Model) -> T,
    per_tensor: usize,
) -> Result<f64, String> {
    let grads = {
        let mut tape = Tape::new();
        let root = f(&mut tape, model);
        tape.backward(root, model.params.len())
    };
    let h = 1e-4;
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let base = model.params.get(id).clone();
        let analytic = grads.param(id.0).cloned();
        let (rows, cols) = base.dim();
        let total = rows * cols;
        for s in 0..per_tensor.min(total) {
            // spread probes across the tensor deterministically
            let flat = (s * 2654435761 + 17) % total;
            let (r, c) = (flat / cols, flat % cols);
            let v = base[[r, c]];
            let mut probe = |delta: f64| -> f64 {
                let mut m = base.clone();
                m[[r, c]] = v + delta;
                model.params.set(id, m);
                let mut tape = Tape::new();
                let t = f(&mut tape, model);
                tape.value(t)[[0, 0]]
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            model.params.set(id, base.clone());
            let an = analytic.as_ref().map_or(0.0, |g| g[[r, c]]);
            if fd.abs() < 1e-8 && an.abs() < 1e-8 {
                continue;
            }
            worst = worst.max(rel_err(an, fd));
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// criterion 5: enumeration exactness

fn criterion_5() -> Outcome {
    let records: Vec<DialogueRecord> = (0..733)
        .map(|i| DialogueRecord {
            video_id: format!("v{i:04}"),
            caption: "a caption".into(),
            qa_pairs: (0..ROUNDS).map(|r| (format!("q{r}"), format!("a{r}"))).collect(),
            summary: "a summary".into(),
            split: Split::Test,
        })
        .collect();
    let standard = enumerate_test_cases(&records);
    let strong = enumerate_strong_cases(&records);
    let detail = format!("{} standard / {} strong cases from 733 records", standard.len(), strong.len());
    check(standard.len() == 7330, &detail)?;
    check(strong.len() == 733, &detail)?;
    check(strong.iter().all(|c| c.start_round == STRONG_BASELINE), "bad strong start round")?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// criterion 6: metric oracles on a frozen fixture

mod oracle {
    //! Independent brute-force metric implementations sharing no code with
    //! the library: string-keyed n-grams, quadratic LCS, explicit loops.
    use std::collections::BTreeMap;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect()
    }

    fn grams(s: &str, n: usize) -> BTreeMap<String, usize> {
        let t = toks(s);
        let mut m = BTreeMap::new();
        if t.len() >= n {
            for w in t.windows(n) {
                *m.entry(w.join(" ")).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn bleu(hyps: &[&str], refs: &[&str], n: usize) -> f64 {
        let mut hyp_len = 0.0;
        let mut ref_len = 0.0;
        for (h, r) in hyps.iter().zip(refs) {
            hyp_len += toks(h).len() as f64;
            ref_len += toks(r).len() as f64;
        }
        if hyp_len == 0.0 {
            return 0.0;
        }
        let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len / hyp_len).exp() };
        let mut acc = 0.0;
        for k in 1..=n {
            let mut clip = 0.0;
            let mut tot = 0.0;
            for (h, r) in hyps.iter().zip(refs) {
                let hg = grams(h, k);
                let rg = grams(r, k);
                for (g, &c) in &hg {
                    tot += c as f64;
                    clip += (c.min(*rg.get(g).unwrap_or(&0))) as f64;
                }
            }
            if clip == 0.0 {
                return 0.0;
            }
            acc += (clip / tot).ln();
        }
        bp * (acc / n as f64).exp()
    }

    pub fn rouge(hyps: &[&str], refs: &[&str]) -> f64 {
        let beta2 = 1.2f64 * 1.2;
        let mut sum = 0.0;
        for (h, r) in hyps.iter().zip(refs) {
            let (a, b) = (toks(h), toks(r));
            let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
            for i in 1..=a.len() {
                for j in 1..=b.len() {
                    dp[i][j] = if a[i - 1] == b[j - 1] {
                        dp[i - 1][j - 1] + 1
                    } else {
                        dp[i - 1][j].max(dp[i][j - 1])
                    };
                }
            }
            let l = dp[a.len()][b.len()] as f64;
            if l > 0.0 {
                let p = l / a.len() as f64;
                let rc = l / b.len() as f64;
                sum += (1.0 + beta2) * p * rc / (rc + beta2 * p);
            }
        }
        sum / hyps.len() as f64
    }

    pub fn cider(hyps: &[&str], refs: &[&str]) -> f64 {
        let n_docs = refs.len() as f64;
        let mut total = 0.0;
        for n in 1..=4 {
            let mut df: BTreeMap<String, f64> = BTreeMap::new();
            for r in refs {
                for g in grams(r, n).keys() {
                    *df.entry(g.clone()).or_insert(0.0) += 1.0;
                }
            }
            let vec_of = |s: &str| -> BTreeMap<String, f64> {
                let tf = grams(s, n);
                let z: f64 = tf.values().map(|&c| c as f64).sum();
                tf.into_iter()
                    .map(|(g, c)| {
                        let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                        (g, c as f64 / z.max(1.0) * (n_docs / d).ln())
                    })
                    .collect()
            };
            let mut per = 0.0;
            for (h, r) in hyps.iter().zip(refs) {
                let (vh, vr) = (vec_of(h), vec_of(r));
                let nh = vh.values().map(|v| v * v).sum::<f64>().sqrt();
                let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                if nh > 0.0 && nr > 0.0 {
                    let dot: f64 =
                        vh.iter().filter_map(|(g, v)| vr.get(g).map(|w| v * w)).sum();
                    per += dot / (nh * nr);
                }
            }
            total += per / hyps.len() as f64;
        }
        total / 4.0 * 10.0
    }
}

fn criterion_6() -> Outcome {
    // frozen 10-case fixture: varied lengths, overlaps, repeats
    let hyps = [
        "a man opens the door and waves",
        "the cat sat on the mat",
        "a dog runs in the park today",
        "someone plays loud music in the kitchen",
        "the boy claps twice and leaves the room",
        "a woman reads a book near the window",
        "thunder rolls while the girl spins around",
        "the chef stirs the soup slowly",
        "two children kick a red ball outside",
        "the old radio plays static all night",
    ];
    let refs = [
        "a man opens the door and waves at us",
        "the cat sits on a soft mat",
        "the dog runs around the park",
        "someone plays music in a kitchen",
        "the boy claps and leaves a room",
        "a woman reads her book by the window",
        "thunder rolls as a girl spins",
        "a chef stirs soup very slowly",
        "children kick a red ball outside the house",
        "an old radio plays static through the night",
    ];
    let owned: Vec<String> = hyps.iter().map(|s| s.to_string()).collect();
    let ref_lists: Vec<Vec<String>> = refs.iter().map(|s| vec![s.to_string()]).collect();
    let mut worst = 0.0f64;
    for n in 1..=4 {
        let lib = metrics::bleu_n(&owned, &ref_lists, n).map_err(|e| e.to_string())?;
        let ora = oracle::bleu(&hyps, &refs, n);
        worst = worst.max((lib - ora).abs());
    }
    let lib = metrics::rouge_l(&owned, &ref_lists).map_err(|e| e.to_string())?;
    worst = worst.max((lib - oracle::rouge(&hyps, &refs)).abs());
    let lib = metrics::cider(&owned, &ref_lists).map_err(|e| e.to_string())?;
    worst = worst.max((lib - oracle::cider(&hyps, &refs)).abs());
    check(worst < 1e-6, &format!("fixture deviation {worst:.2e}"))?;

    // the three hand-derived examples
    let b = metrics::bleu_n(&["the cat".into()], &[vec!["the cat sat".into()]], 1)
        .map_err(|e| e.to_string())?;
    check((b - (-0.5f64).exp()).abs() < 1e-12, &format!("BLEU1 hand example: {b}"))?;
    let r = metrics::rouge_l(&["a b c".into()], &[vec!["a x c".into()]]).map_err(|e| e.to_string())?;
    check((r - 2.0 / 3.0).abs() < 1e-9, &format!("ROUGE-L hand example: {r}"))?;
    let ch = ["a man opens the door", "the cat sat on a mat", "a dog runs in the park"];
    let cr = ["a man opens a window", "the cat sits on the mat", "the dog runs around the park"];
    let c = metrics::cider(
        &ch.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        &cr.iter().map(|s| vec![s.to_string()]).collect::<Vec<_>>(),
    )
    .map_err(|e| e.to_string())?;
    let co = oracle::cider(&ch, &cr);
    check((c - co).abs() < 1e-6, &format!("CIDEr hand example: {c} vs {co}"))?;
    Ok(format!("max oracle deviation {worst:.2e}; hand examples exact"))
}

// ---------------------------------------------------------------------------
// criterion 7: determinism and round-trips

fn criterion_7() -> Outcome {
    // bit-identical loss traces
    let run = || {
        let corpus = synth_dataset(6, 31);
        let vocab = build_vocabulary(&corpus.records, 1).unwrap();
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.regions = 49;
        cfg.d_visual = 512;
        cfg.d_audio = 256;
        let mut model = Model::new(cfg);
        let tc = TrainConfig { epochs: 2, batch_size: 3, ..Default::default() };
        let report =
            train(&mut model, &corpus.records, &[], &corpus.features, &vocab, &tc, None).unwrap();
        (report.loss_trace, model)
    };
    let (t1, model) = run();
    let (t2, _) = run();
    check(t1.len() == t2.len() && !t1.is_empty(), "trace lengths differ")?;
    for (a, b) in t1.iter().zip(&t2) {
        check(
            a.total.to_bits() == b.total.to_bits()
                && a.desc.to_bits() == b.desc.to_bits()
                && a.q.to_bits() == b.q.to_bits()
                && a.a.to_bits() == b.a.to_bits(),
            "loss traces not bit-identical",
        )?;
    }

    // checkpoint round-trip
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ck = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &model.params, &model.config_json()).map_err(|e| e.to_string())?;
    let mut fresh = Model::new(model.config.clone());
    load_checkpoint(&ck, &mut fresh.params).map_err(|e| e.to_string())?;
    for id in model.params.ids() {
        let a = model.params.get(id);
        let b = fresh.params.get(id);
        check(a.dim() == b.dim(), "checkpoint shape drift")?;
        for (x, y) in a.iter().zip(b.iter()) {
            check(x.to_bits() == y.to_bits(), "checkpoint payload not bit-exact")?;
        }
    }

    // feature file round-trip
    let mut init = Init::new(9);
    let vis = Array3::from_shape_fn((4, 49, 512), |(i, j, k)| {
        (init.uniform(1, 1, 1.0)[[0, 0]] + (i + j + k) as f64 * 1e-3) as f32
    });
    let aud = Array1::from_shape_fn(256, |i| (i as f32).sin());
    let fs = FeatureSet::new(vis, aud).map_err(|e| e.to_string())?;
    let vp = dir.path().join("x.vis.qacf");
    let ap = dir.path().join("x.aud.qacf");
    write_feature_file(&vp, &fs.visual_dyn()).map_err(|e| e.to_string())?;
    write_feature_file(&ap, &fs.audio_dyn()).map_err(|e| e.to_string())?;
    let rv = read_feature_file(&vp).map_err(|e| e.to_string())?;
    let ra = read_feature_file(&ap).map_err(|e| e.to_string())?;
    check(
        rv.iter().zip(fs.visual_dyn().iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "visual features not bit-exact after round-trip",
    )?;
    check(
        ra.iter().zip(fs.audio_dyn().iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "audio features not bit-exact after round-trip",
    )?;
    Ok(format!("{} bit-identical loss steps; checkpoint and feature round-trips exact", t1.len()))
}

// ---------------------------------------------------------------------------
// criterion 8: Q-BOT isolation through full rollouts

fn criterion_8() -> Outcome {
    let n = 100;
    let corpus = synth_dataset(n, 41);
    let vocab = build_vocabulary(&corpus.records, 1).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.regions = 49;
    cfg.d_visual = 512;
    cfg.d_audio = 256;
    let model = Model::new(cfg);

    // perturb everything Q-BOT must not see: audio, caption, middle frames
    let mut noise = Init::new(97);
    let mut perturbed = FeatureStore::new();
    let mut perturbed_records = corpus.records.clone();
    for rec in &mut perturbed_records {
        let fs = corpus.features.get(&rec.video_id).unwrap();
        let mut vis = fs.visual.clone();
        for f in 1..=2 {
            for v in vis.index_axis_mut(ndarray::Axis(0), f).iter_mut() {
                *v += noise.uniform(1, 1, 1.0)[[0, 0]] as f32;
            }
        }
        let aud = fs.audio.mapv(|x| x + 0.731);
        perturbed.insert(&rec.video_id, FeatureSet::new(vis, aud).unwrap());
        rec.caption = "completely different caption text".into();
    }

    let modes = DialogModes::default();
    // interactive rollout from round 10: nine ground-truth pairs of history,
    // then Q-BOT asks — that question may not move
    let starts = vec![ROUNDS; n];
    let clean = run_dialog_batch(&model, &corpus.records, &corpus.features, &vocab, &starts, &modes)
        .map_err(|e| e.to_string())?;
    let pert =
        run_dialog_batch(&model, &perturbed_records, &perturbed, &vocab, &starts, &modes)
            .map_err(|e| e.to_string())?;
    for (c, p) in clean.iter().zip(&pert) {
        check(
            c.rounds[ROUNDS - 1].question == p.rounds[ROUNDS - 1].question,
            &format!("question moved for {}", c.video_id),
        )?;
    }
    // strong-baseline rollout: identical history, so the description may not move
    let starts = vec![STRONG_BASELINE; n];
    let clean = run_dialog_batch(&model, &corpus.records, &corpus.features, &vocab, &starts, &modes)
        .map_err(|e| e.to_string())?;
    let pert =
        run_dialog_batch(&model, &perturbed_records, &perturbed, &vocab, &starts, &modes)
            .map_err(|e| e.to_string())?;
    for (c, p) in clean.iter().zip(&pert) {
        check(c.description == p.description, &format!("description moved for {}", c.video_id))?;
    }
    Ok(format!("{n} perturbed rollouts: questions and descriptions bit-identical"))
}

// ---------------------------------------------------------------------------
// criterion 9: parameter accounting

/// Closed-form parameter count derived by hand from the architecture.
fn oracle_param_count(c: &ModelConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let mlp = |i: usize, h: usize, o: usize| lin(i, h) + lin(h, o);
    let lstm = |i: usize, h: usize| lin(i + h, 4 * h);
    let mm = |ws: &[usize], s: usize, u: usize| -> usize {
        let k = ws.len();
        ws.iter().map(|&w| lin(w, s) + mlp(s, u, 1)).sum::<usize>() + k * (k - 1) * s * s
    };
    let dec = |v: usize, dt: usize, ci: usize, h: usize, ds: usize| {
        v * dt + lin(ci, h) + lstm(dt + h, h) + lin(h, v) + lin(h, ds)
    };
    let (v, dh, dc, dt, dv, da, s, u) = (
        c.vocab_size,
        c.d_history,
        c.d_caption,
        c.d_token,
        c.d_visual,
        c.d_audio,
        c.d_score,
        c.unary_hidden,
    );
    (v * dt + lstm(dt, dh) + dh)                       // history encoder + null state
        + (v * dc + lstm(dc, dc))                      // caption encoder
        + lin(dv, dv)                                  // Q visual projection
        + (lin(dv, dv) + lin(da, da))                  // A feature projections
        + mm(&[dv, dv, dh], s, u)                      // Q MM attention
        + mm(&[da, dv, dv, dv, dv, dc, dh], s, u)      // A MM attention
        + lin(dc + dh, dh)                             // IM query projection
        + (lin(da, dh) + lin(dv, dh))                  // AV LSTM input projections
        + lstm(dv, dh)                                 // visual LSTM
        + lstm(dh, dh)                                 // audio-visual LSTM
        + dec(v, dt, dh, dh, dh)                       // question decoder
        + dec(v, dt, dh + dc + dh, dh, dh)             // answer decoder
        + dec(v, dt, dh, dh, dh)                       // description decoder
        + lin(2 * dh, dh)                              // pair embedding projection
}

fn criterion_9() -> Outcome {
    let tiny = ModelConfig::tiny(11);
    let model = Model::new(tiny.clone());
    let counted = model.count_parameters();
    let oracled = oracle_param_count(&tiny);
    check(
        counted == oracled,
        &format!("tiny config: counted {counted}, closed form {oracled}"),
    )?;
    let paper = Model::new(ModelConfig::paper(6000));
    let paper_count = paper.count_parameters();
    let paper_oracle = oracle_param_count(&ModelConfig::paper(6000));
    check(paper_count == paper_oracle, "paper-dims count disagrees with closed form")?;
    let detail = format!(
        "tiny count {counted} matches closed form; paper dims with 6000-word vocabulary: \
         {paper_count} parameters vs the reference's approximately 19M (the exact total \
         depends on the vocabulary size, which sets embedding and output layers)"
    );
    check((15_000_000..24_000_000).contains(&paper_count), &detail)?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// criterion 10: ablation switches

fn criterion_10() -> Outcome {
    let corpus = synth_dataset(4, 51);
    let vocab = build_vocabulary(&corpus.records, 1).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.regions = 49;
    cfg.d_visual = 512;
    cfg.d_audio = 256;
    let model = Model::new(cfg);
    let batch = pad_batch(&corpus.records, &corpus.features, &vocab, &[1, 4, 7, 10])
        .map_err(|e| e.to_string())?;

    let grads_under = |ablation: Ablation, update: UpdateMode| -> Result<_, String> {
        let modes = DialogModes { update, ablation, ..Default::default() };
        let graph = loss_graph(&model, &batch, 1.0, 1.0, &modes).map_err(|e| e.to_string())?;
        let grads = graph.tape.backward(graph.total, model.params.len());
        Ok((graph, grads))
    };
    let param_grad_norm = |grads: &qacoop_core::tensor::Grads, prefix: &str| -> f64 {
        model
            .params
            .ids()
            .filter(|&id| model.params.name(id).starts_with(prefix))
            .map(|id| grads.param(id.0).map_or(0.0, |g| g.mapv(f64::abs).sum()))
            .sum()
    };

    // every switch must also complete an evaluation rollout
    let eval_under = |modes: &DialogModes, recs: &[DialogueRecord]| -> Result<(), String> {
        metrics::evaluate(
            &model,
            recs,
            &corpus.features,
            &vocab,
            modes,
            metrics::EvalMode::Standard,
            8,
        )
        .map(|_| ())
        .map_err(|e| e.to_string())
    };

    // no-caption: caption encoder parameters get no gradient
    let (_, g) = grads_under(Ablation { no_caption: true, ..Default::default() }, UpdateMode::Full)?;
    check(param_grad_norm(&g, "abot.caption") == 0.0, "no-caption still reaches caption params")?;
    eval_under(
        &DialogModes { ablation: Ablation { no_caption: true, ..Default::default() }, ..Default::default() },
        &corpus.records,
    )?;

    // no-audio: the raw audio input node gets no gradient
    let (graph, g) = grads_under(Ablation { no_audio: true, ..Default::default() }, UpdateMode::Full)?;
    let audio_grad = g.node(graph.audio_node).map_or(0.0, |a| a.mapv(f64::abs).sum());
    check(audio_grad == 0.0, "no-audio still reaches the audio input")?;
    // sanity: with audio enabled the same node does receive gradient
    let (graph_on, g_on) = grads_under(Ablation::default(), UpdateMode::Full)?;
    let on = g_on.node(graph_on.audio_node).map_or(0.0, |a| a.mapv(f64::abs).sum());
    check(on > 0.0, "baseline audio gradient unexpectedly zero")?;
    eval_under(
        &DialogModes { ablation: Ablation { no_audio: true, ..Default::default() }, ..Default::default() },
        &corpus.records,
    )?;

    // no-his-for-A: A-BOT's history attention parameters get no gradient
    let (_, g) = grads_under(Ablation { no_his_for_a: true, ..Default::default() }, UpdateMode::Full)?;
    check(
        param_grad_norm(&g, "abot.mm.history") == 0.0
            && param_grad_norm(&g, "abot.mm.pair.history") == 0.0
            && param_grad_norm(&g, "abot.im") == 0.0,
        "no-his-for-A still reaches A-side history params",
    )?;
    eval_under(
        &DialogModes { ablation: Ablation { no_his_for_a: true, ..Default::default() }, ..Default::default() },
        &corpus.records,
    )?;

    // no-init: the decoder-initialization LSTMs get no gradient
    let (_, g) = grads_under(Ablation { no_init: true, ..Default::default() }, UpdateMode::Full)?;
    check(
        param_grad_norm(&g, "qbot.visual_lstm") == 0.0
            && param_grad_norm(&g, "abot.av_lstm") == 0.0
            && param_grad_norm(&g, "abot.av_in_aud") == 0.0
            && param_grad_norm(&g, "abot.av_in_vis") == 0.0,
        "no-init still reaches the initialization LSTMs",
    )?;
    eval_under(
        &DialogModes { ablation: Ablation { no_init: true, ..Default::default() }, ..Default::default() },
        &corpus.records,
    )?;

    // partial update: completes and differs from full where rounds extend
    // past the start round
    let (full_graph, _) = grads_under(Ablation::default(), UpdateMode::Full)?;
    let (partial_graph, _) = grads_under(Ablation::default(), UpdateMode::Partial)?;
    check(
        (full_graph.breakdown.total - partial_graph.breakdown.total).abs() > 0.0,
        "partial update indistinguishable from full",
    )?;
    eval_under(&DialogModes { update: UpdateMode::Partial, ..Default::default() }, &corpus.records)?;

    // shuffle-qa: seeded permutation of the ground-truth pairs
    let shuffled: Vec<DialogueRecord> =
        corpus.records.iter().map(|r| shuffle_qa_pairs(r, 5)).collect();
    let mut any_moved = false;
    for (o, s) in corpus.records.iter().zip(&shuffled) {
        let mut sorted_o = o.qa_pairs.clone();
        let mut sorted_s = s.qa_pairs.clone();
        sorted_o.sort();
        sorted_s.sort();
        check(sorted_o == sorted_s, "shuffle-qa changed pair contents")?;
        if o.qa_pairs != s.qa_pairs {
            any_moved = true;
        }
        let again = shuffle_qa_pairs(o, 5);
        check(again.qa_pairs == s.qa_pairs, "shuffle-qa not deterministic")?;
    }
    check(any_moved, "shuffle-qa left every record unchanged")?;
    eval_under(&DialogModes::default(), &shuffled)?;

    Ok("all six switches evaluated; removed inputs provably gradient-free".into())
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Outcome| {
        match &r {
            Ok(d) => println!("criterion {n:2} ({name}): PASS — {d}"),
            Err(d) => println!("criterion {n:2} ({name}): FAIL — {d}"),
        }
        results.push((n, name, r));
    };

    record(4, "gradient checks", criterion_4());
    record(5, "enumeration exactness", criterion_5());
    record(6, "metric oracles", criterion_6());
    record(7, "determinism and round-trips", criterion_7());
    record(8, "Q-BOT isolation", criterion_8());
    record(9, "parameter accounting", criterion_9());
    record(10, "ablation switches", criterion_10());
    // ACCEPTANCE_QUICK=1 skips the three training-heavy criteria while
    // iterating on the fast ones
    if std::env::var("ACCEPTANCE_QUICK").is_err() {
        record(1, "overfit fidelity", criterion_1());
        let (c2, c3) = criteria_2_3();
        record(2, "knowledge gap", c2);
        record(3, "attribute recovery", c3);
    }

    results.sort_by_key(|(n, _, _)| *n);
    println!("\nacceptance summary:");
    for (n, name, r) in &results {
        println!(
            "criterion {n:2} ({name}): {}",
            if r.is_ok() { "PASS" } else { "FAIL" }
        );
    }
    let failures: Vec<String> = results
        .iter()
        .filter_map(|(n, name, r)| r.as_ref().err().map(|e| format!("criterion {n} ({name}): {e}")))
        .collect();
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}

//! Operator entry point: corpus synthesis, ingestion, training, rollout,
//! evaluation, ablations, and artifact inspection.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qacoop_core::agents::{Model, ModelConfig};
use qacoop_core::data::{
    assign_splits, build_vocabulary, save_manifest, synth_dataset, Dataset, Split, Vocabulary,
};
use qacoop_core::dialog::{run_dialog, shuffle_qa_pairs, DialogModes, STRONG_BASELINE};
use qacoop_core::metrics::{evaluate, EvalMode};
use qacoop_core::nn::{load_checkpoint, load_checkpoint_config};
use qacoop_core::training::{train, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "qacoop", about = "QA-cooperative video description agents", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus.
    Synth(SynthArgs),
    /// Validate a data directory and print a summary.
    Ingest(IngestArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Run one dialog and print the transcript as JSON lines.
    Rollout(RolloutArgs),
    /// Score a trained model on a split.
    Evaluate(EvaluateArgs),
    /// Evaluate under named ablation switches.
    Ablate(AblateArgs),
    /// Print checkpoint or dataset facts.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of examples to generate (>= 1).
    #[arg(long)]
    n: usize,
    /// Generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Examples assigned to the train split (default: all).
    #[arg(long)]
    train: Option<usize>,
    /// Examples assigned to the val split (taken after train).
    #[arg(long, default_value_t = 0)]
    val: usize,
}

#[derive(Args)]
struct IngestArgs {
    /// Data directory holding manifests and features/.
    #[arg(long, env = "QACOOP_DATA")]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Data directory holding manifests and features/.
    #[arg(long, env = "QACOOP_DATA")]
    data: PathBuf,
    /// Output directory for checkpoints, vocab, and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags and --set override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set lambda_q=0 --set update_mode=partial.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "QACOOP_DATA")]
    data: PathBuf,
    /// Vocabulary file; defaults to vocab.json beside the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Video id from the manifest.
    #[arg(long)]
    video: String,
    /// First generated round, 1..=10.
    #[arg(long, default_value_t = 1)]
    start_round: usize,
    /// Give all ten ground-truth pairs and only generate the description.
    #[arg(long, default_value_t = false)]
    strong: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliEvalMode {
    Standard,
    Strong,
    Basic,
}

impl From<CliEvalMode> for EvalMode {
    fn from(m: CliEvalMode) -> Self {
        match m {
            CliEvalMode::Standard => EvalMode::Standard,
            CliEvalMode::Strong => EvalMode::Strong,
            CliEvalMode::Basic => EvalMode::Basic,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "QACOOP_DATA")]
    data: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CliEvalMode::Standard)]
    mode: CliEvalMode,
    /// Split to score.
    #[arg(long, default_value = "test")]
    split: String,
    /// Rollout batch size.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Worker count; results are identical for any value.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write the JSON report here in addition to printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AblationSwitch {
    NoCaption,
    NoAudio,
    #[value(name = "no-his-for-A", alias = "no-his-for-a")]
    NoHisForA,
    NoInit,
    Partial,
    ShuffleQa,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "QACOOP_DATA")]
    data: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Ablation switch; repeat the flag to combine several.
    #[arg(long = "switch", value_enum, required = true)]
    switches: Vec<AblationSwitch>,
    /// Seed for the shuffle-qa permutation.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Print a checkpoint's config and parameter count.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Print a data directory's split and feature counts.
    #[arg(long, env = "QACOOP_DATA")]
    data: Option<PathBuf>,
    /// Report the parameter count at paper dimensions for this vocabulary size.
    #[arg(long)]
    paper_vocab: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    let n_train = a.train.unwrap_or(a.n);
    if n_train + a.val > a.n {
        bail!("--train plus --val exceeds --n");
    }
    let mut corpus = synth_dataset(a.n, a.seed);
    assign_splits(&mut corpus.records, n_train, a.val);
    std::fs::create_dir_all(a.out.join("features"))?;
    for (name, split) in [("train.json", Split::Train), ("val.json", Split::Val), ("test.json", Split::Test)] {
        let recs: Vec<_> = corpus.records.iter().filter(|r| r.split == split).cloned().collect();
        if !recs.is_empty() {
            save_manifest(&a.out.join(name), &recs)?;
        }
    }
    corpus.features.write_all(&a.out.join("features"))?;
    println!(
        "wrote {} records ({} train / {} val / {} test) and {} feature file pairs to {}",
        a.n,
        n_train,
        a.val,
        a.n - n_train - a.val,
        a.n,
        a.out.display()
    );
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let ds = Dataset::load_dir(&a.data)?;
    println!(
        "{}: {} train / {} val / {} test records, {} feature sets",
        a.data.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.features.len()
    );
    Ok(())
}

/// Route a `--set` override into the right place in the config document.
fn apply_override(doc: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let val: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let obj = doc.as_object_mut().context("config must be a JSON object")?;
    match key {
        "update_mode" => {
            obj.entry("modes").or_insert_with(|| serde_json::json!({}))["update"] = val;
        }
        "attention_mode" => {
            obj.entry("modes").or_insert_with(|| serde_json::json!({}))["attention"] = val;
        }
        "no_caption" | "no_audio" | "no_his_for_a" | "no_init" => {
            let modes = obj.entry("modes").or_insert_with(|| serde_json::json!({}));
            if modes.get("ablation").is_none() {
                modes["ablation"] = serde_json::json!({});
            }
            modes["ablation"][key] = val;
        }
        _ => {
            obj.insert(key.to_string(), val);
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut doc: serde_json::Value = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => serde_json::json!({}),
    };
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv}"))?;
        apply_override(&mut doc, k, v)?;
    }
    let model_doc = doc.as_object_mut().context("config must be a JSON object")?.remove("model");
    let cfg: TrainConfig = serde_json::from_value(doc).context("parsing training config")?;
    cfg.validate()?;

    let ds = Dataset::load_dir(&a.data)?;
    if ds.train.is_empty() {
        bail!("no train records in {}", a.data.display());
    }
    let vocab = build_vocabulary(&ds.train, 1)?;
    std::fs::create_dir_all(&a.out)?;
    vocab.save(&a.out.join("vocab.json"))?;

    let model_cfg: ModelConfig = match model_doc {
        Some(mut m) => {
            if m.get("vocab_size").is_none() {
                m["vocab_size"] = serde_json::json!(vocab.len());
            }
            serde_json::from_value(m).context("parsing model config")?
        }
        None => ModelConfig::paper(vocab.len()),
    };
    let mut model = Model::new(model_cfg);
    println!("model: {} parameters, vocab {}", model.count_parameters(), vocab.len());
    let report = train(&mut model, &ds.train, &ds.val, &ds.features, &vocab, &cfg, Some(&a.out))?;
    println!(
        "trained {} steps over {} epochs; best perplexity {:.4}, final {:.4}",
        report.steps, report.epochs_run, report.best_perplexity, report.final_perplexity
    );
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<Model> {
    let cfg_json = load_checkpoint_config(checkpoint)?;
    let cfg: ModelConfig = serde_json::from_value(cfg_json).context("parsing checkpoint config")?;
    let mut model = Model::new(cfg);
    load_checkpoint(checkpoint, &mut model.params)?;
    Ok(model)
}

fn load_vocab(explicit: &Option<PathBuf>, checkpoint: &Path) -> Result<Vocabulary> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => checkpoint
            .parent()
            .map(|d| d.join("vocab.json"))
            .context("checkpoint has no parent directory; pass --vocab")?,
    };
    Ok(Vocabulary::load(&path)?)
}

fn split_records<'a>(ds: &'a Dataset, split: &str) -> Result<&'a [qacoop_core::data::DialogueRecord]> {
    let recs = match split {
        "train" => &ds.train,
        "val" => &ds.val,
        "test" => &ds.test,
        other => bail!("unknown split {other} (expected train, val, or test)"),
    };
    if recs.is_empty() {
        bail!("split {split} is empty");
    }
    Ok(recs)
}

fn cmd_rollout(a: RolloutArgs) -> Result<()> {
    if a.strong {
        if a.start_round != 1 && a.start_round != STRONG_BASELINE {
            bail!("--start-round is ignored with --strong; drop one of the flags");
        }
    } else if !(1..=10).contains(&a.start_round) {
        bail!("--start-round must be in 1..=10 (use --strong for the full-history baseline)");
    }
    let start = if a.strong { STRONG_BASELINE } else { a.start_round };
    let model = load_model(&a.checkpoint)?;
    let vocab = load_vocab(&a.vocab, &a.checkpoint)?;
    let ds = Dataset::load_dir(&a.data)?;
    let record = ds
        .train
        .iter()
        .chain(&ds.val)
        .chain(&ds.test)
        .find(|r| r.video_id == a.video)
        .with_context(|| format!("unknown video id {}", a.video))?;
    let t = run_dialog(&model, record, &ds.features, &vocab, start, &DialogModes::default())?;
    println!("{}", t.to_jsonl());
    Ok(())
}

fn run_report(
    model: &Model,
    records: &[qacoop_core::data::DialogueRecord],
    ds: &Dataset,
    vocab: &Vocabulary,
    modes: &DialogModes,
    mode: EvalMode,
    batch_size: usize,
    out: &Option<PathBuf>,
) -> Result<()> {
    let report = evaluate(model, records, &ds.features, vocab, modes, mode, batch_size)?;
    print!("{}", report.table());
    if let Some(p) = out {
        std::fs::write(p, report.to_json())?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    if a.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let model = load_model(&a.checkpoint)?;
    let vocab = load_vocab(&a.vocab, &a.checkpoint)?;
    let ds = Dataset::load_dir(&a.data)?;
    let records = split_records(&ds, &a.split)?;
    run_report(&model, records, &ds, &vocab, &DialogModes::default(), a.mode.into(), a.batch_size, &a.out)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut modes = DialogModes::default();
    let mut shuffle = false;
    for s in &a.switches {
        match s {
            AblationSwitch::NoCaption => modes.ablation.no_caption = true,
            AblationSwitch::NoAudio => modes.ablation.no_audio = true,
            AblationSwitch::NoHisForA => modes.ablation.no_his_for_a = true,
            AblationSwitch::NoInit => modes.ablation.no_init = true,
            AblationSwitch::Partial => modes.update = qacoop_core::dialog::UpdateMode::Partial,
            AblationSwitch::ShuffleQa => shuffle = true,
        }
    }
    let model = load_model(&a.checkpoint)?;
    let vocab = load_vocab(&a.vocab, &a.checkpoint)?;
    let ds = Dataset::load_dir(&a.data)?;
    let records = split_records(&ds, &a.split)?;
    let records: Vec<_> = if shuffle {
        records.iter().map(|r| shuffle_qa_pairs(r, a.seed)).collect()
    } else {
        records.to_vec()
    };
    println!("switches: {:?}", a.switches);
    run_report(&model, &records, &ds, &vocab, &modes, EvalMode::Standard, a.batch_size, &a.out)
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let mut did_something = false;
    if let Some(cp) = &a.checkpoint {
        let cfg_json = load_checkpoint_config(cp)?;
        let cfg: ModelConfig = serde_json::from_value(cfg_json.clone()).context("parsing checkpoint config")?;
        let model = Model::new(cfg);
        println!("checkpoint {}", cp.display());
        println!("config: {}", serde_json::to_string_pretty(&cfg_json)?);
        println!("parameters: {}", model.count_parameters());
        did_something = true;
    }
    if let Some(data) = &a.data {
        if data.exists() {
            let ds = Dataset::load_dir(data)?;
            println!(
                "data {}: {} train / {} val / {} test records, {} feature sets",
                data.display(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                ds.features.len()
            );
            did_something = true;
        }
    }
    if let Some(v) = a.paper_vocab {
        let model = Model::new(ModelConfig::paper(v));
        println!(
            "paper-dimension parameter count for vocabulary size {}: {}",
            v,
            model.count_parameters()
        );
        println!(
            "note: the reference architecture reports approximately 19M parameters; the exact \
             total depends on the vocabulary size, which fixes the embedding and output layers"
        );
        did_something = true;
    }
    if !did_something {
        bail!("pass --checkpoint, --data, or --paper-vocab");
    }
    Ok(())
}

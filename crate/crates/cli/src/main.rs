mod config;
mod output;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ctxclf::data::{
    build_instances, estimated_noise_rate, generate_synthetic, load_corpus, save_corpus,
    synthetic_embeddings, ContextMode, Instance, LabelMap,
};
use ctxclf::embeddings::{train_skipgram, EmbeddingTable};
use ctxclf::experiment::{compare_variants, default_grid, sweep, sweep_csv, SweepParameter};
use ctxclf::model::{embed_instances, Example, Model, ModelVariant};
use ctxclf::training::{
    argmax, class_weights, evaluate, label_frequencies, stratified_folds, train_fold,
};

use config::{load_config, set, DataFlags, ModelFlags, RunConfig, TrainFlags};
use output::{input_entry, OutputDir};

#[derive(Parser, Debug)]
#[command(name = "ctxclf", version, about = "Sentence classification with document context")]
struct Cli {
    /// JSON config file; flags take precedence over it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus whose labels live in the context
    Synth(SynthArgs),
    /// Train skip-gram word vectors on a corpus
    Embed(EmbedArgs),
    /// Train one model on a whole corpus and save a checkpoint
    Train(TrainArgs),
    /// Cross-validate one or more variants on shared folds
    Cv(CvArgs),
    /// Cross-validated accuracy over a grid of forgetting factors
    Sweep(SweepArgs),
    /// Label every sentence of a corpus with a saved model
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    documents: Option<usize>,
    /// Sentences per document
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    sentence_length: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Offset of the signal sentence from the focus; negative means earlier
    #[arg(long, allow_hyphen_values = true)]
    signal_position: Option<i64>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    /// Also write the label's indicator into the focus sentence
    #[arg(long)]
    focus_signal: bool,
    /// Data seed
    #[arg(long)]
    seed: Option<u64>,
    /// Dimension of the emitted embedding file (default: model.embed_dim)
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Data seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value = "c-lstm-cnn")]
    variant: ModelVariant,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Comma-separated variants (default: all five)
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<ModelVariant>>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// alpha_cont or alpha_sent
    #[arg(long, default_value = "alpha_cont")]
    parameter: SweepParameter,
    /// Comma-separated values (default 0.1, 0.2, ..., 1.0)
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, default_value = "c-lstm-cnn")]
    variant: ModelVariant,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding file (default: embeddings.txt next to the checkpoint)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum)]
    context: Option<config::ContextArg>,
    #[arg(long)]
    out_dir: PathBuf,
}

struct Prepared {
    cfg: RunConfig,
    labels: LabelMap,
    instances: Vec<Instance>,
    examples: Vec<Example>,
    inputs: serde_json::Value,
}

fn prepare(config: Option<&Path>, data: &DataFlags, model: &ModelFlags, train: &TrainFlags) -> Result<Prepared> {
    let (mut cfg, embed_dim_in_file) = load_config(config)?;
    model.apply(&mut cfg.model);
    train.apply(&mut cfg.train);
    let context = data.context.map(ContextMode::from).or(cfg.context).unwrap_or(ContextMode::Adjacent);
    cfg.context = Some(context);

    let (docs, labels) = load_corpus(&data.corpus)?;
    let table = EmbeddingTable::load_word2vec_text(&data.embeddings)?;
    if !embed_dim_in_file && model.embed_dim.is_none() {
        cfg.model.embed_dim = table.dim();
    }
    if cfg.model.embed_dim != table.dim() {
        bail!(
            "embed_dim is {} but {} has {}-dimensional vectors",
            cfg.model.embed_dim,
            data.embeddings.display(),
            table.dim()
        );
    }
    cfg.model.num_classes = labels.len();
    cfg.model.validate().context("model configuration")?;
    cfg.train.validate().context("training configuration")?;
    let instances = build_instances(&docs, &labels, context)?;
    if instances.is_empty() {
        bail!("{} has no labeled sentences", data.corpus.display());
    }
    let examples = embed_instances(&table, &instances);
    log::info!(
        "{} instances, {} classes, {} embedding dims",
        examples.len(),
        labels.len(),
        table.dim()
    );
    Ok(Prepared {
        cfg,
        labels,
        instances,
        examples,
        inputs: json!({
            "corpus": input_entry(&data.corpus)?,
            "embeddings": input_entry(&data.embeddings)?,
        }),
    })
}

fn seeds(cfg: &RunConfig) -> serde_json::Value {
    json!({ "init": cfg.model.seed, "shuffle": cfg.train.shuffle_seed })
}

fn cmd_synth(config: Option<&Path>, a: &SynthArgs) -> Result<()> {
    let (mut cfg, _) = load_config(config)?;
    let s = &mut cfg.synth;
    set(&mut s.num_documents, a.documents);
    set(&mut s.sentences_per_document, a.sentences);
    set(&mut s.sentence_length, a.sentence_length);
    set(&mut s.vocab_size, a.vocab_size);
    set(&mut s.num_classes, a.classes);
    set(&mut s.signal_position, a.signal_position);
    set(&mut s.noise_rate, a.noise_rate);
    set(&mut s.distractors, a.distractors);
    set(&mut s.seed, a.seed);
    s.focus_signal |= a.focus_signal;
    let dim = a.embed_dim.unwrap_or(cfg.model.embed_dim);

    let docs = generate_synthetic(&cfg.synth)?;
    let table = synthetic_embeddings(&cfg.synth, dim, cfg.synth.seed)?;
    let mut out = OutputDir::create(&a.out_dir)?;
    save_corpus(out.file("corpus.jsonl"), &docs)?;
    table.save_word2vec_text(out.file("embeddings.txt"))?;
    cfg.synth.label_map().save(out.file("labels.json"))?;
    let noise = estimated_noise_rate(&docs, &cfg.synth);
    log::info!("wrote {} documents; estimated noise rate {noise:.4}", docs.len());
    out.commit(
        "synth",
        json!({
            "synth": cfg.synth,
            "embed_dim": dim,
            "seeds": { "data": cfg.synth.seed },
            "bayes_accuracy": cfg.synth.bayes_accuracy(),
            "estimated_noise_rate": noise,
        }),
    )
}

fn cmd_embed(config: Option<&Path>, a: &EmbedArgs) -> Result<()> {
    let (mut cfg, _) = load_config(config)?;
    let s = &mut cfg.skipgram;
    set(&mut s.dim, a.dim);
    set(&mut s.window, a.window);
    set(&mut s.negatives, a.negatives);
    set(&mut s.epochs, a.epochs);
    set(&mut s.lr, a.lr);
    set(&mut s.seed, a.seed);
    let (docs, _) = load_corpus(&a.corpus)?;
    let corpus: Vec<Vec<String>> = docs
        .iter()
        .flat_map(|d| d.sentences.iter().map(|s| s.tokens.to_vec()))
        .filter(|t| !t.is_empty())
        .collect();
    let table = train_skipgram(&corpus, &cfg.skipgram)?;
    let mut out = OutputDir::create(&a.out_dir)?;
    table.save_word2vec_text(out.file("embeddings.txt"))?;
    out.commit(
        "embed",
        json!({
            "skipgram": cfg.skipgram,
            "seeds": { "data": cfg.skipgram.seed },
            "inputs": { "corpus": input_entry(&a.corpus)? },
            "vocabulary": table.len(),
        }),
    )
}

fn cmd_train(config: Option<&Path>, a: &TrainArgs) -> Result<()> {
    let p = prepare(config, &a.data, &a.model, &a.train)?;
    let weights = class_weights(&label_frequencies(&p.examples, p.labels.len()))
        .context("computing class weights")?;
    let mut model = Model::init(a.variant, p.cfg.model.clone())?;
    let outcome = train_fold(&mut model, &p.examples, &p.cfg.train, &weights)?;
    let train_eval = evaluate(&model, &p.examples)?;
    log::info!("training accuracy {:.4}", train_eval.accuracy);

    let mut out = OutputDir::create(&a.out_dir)?;
    model.save_checkpoint(out.file("model.ckpt"), &p.labels)?;
    let emb = out.file("embeddings.txt");
    fs::copy(&a.data.embeddings, &emb).with_context(|| format!("copying embeddings to {}", emb.display()))?;
    out.commit(
        "train",
        json!({
            "variant": a.variant,
            "config": p.cfg,
            "labels": p.labels.labels,
            "seeds": seeds(&p.cfg),
            "inputs": p.inputs,
            "class_weights": weights,
            "epoch_losses": outcome.epoch_losses,
            "train_seconds": outcome.seconds,
            "train_accuracy": train_eval.accuracy,
            "num_params": model.num_params(),
        }),
    )
}

fn cmd_cv(config: Option<&Path>, a: &CvArgs) -> Result<()> {
    let p = prepare(config, &a.data, &a.model, &a.train)?;
    let variants = a.variants.clone().unwrap_or_else(|| ModelVariant::ALL.to_vec());
    let cmp = compare_variants(&p.examples, &p.labels.labels, &variants, &p.cfg.model, &p.cfg.train)?;
    let labels: Vec<usize> = p.examples.iter().map(|e| e.label).collect();
    let folds = stratified_folds(&labels, p.cfg.train.folds, p.cfg.train.shuffle_seed)?;
    let fold_members: Vec<Vec<serde_json::Value>> = folds
        .iter()
        .map(|f| {
            f.iter()
                .map(|&i| json!([p.instances[i].doc_id, p.instances[i].sentence_index]))
                .collect()
        })
        .collect();

    let mut out = OutputDir::create(&a.out_dir)?;
    out.write("results.csv", cmp.to_csv())?;
    out.write("summary.json", serde_json::to_string_pretty(&cmp.summary_json())? + "\n")?;
    out.write("folds.json", serde_json::to_string(&fold_members)? + "\n")?;
    for r in &cmp.results {
        log::info!(
            "{}: accuracy {:.4} ({:.4})",
            r.variant,
            r.summary.accuracy.mean,
            r.summary.accuracy.std
        );
    }
    out.commit(
        "cv",
        json!({
            "variants": variants,
            "config": p.cfg,
            "labels": p.labels.labels,
            "seeds": seeds(&p.cfg),
            "inputs": p.inputs,
        }),
    )
}

fn cmd_sweep(config: Option<&Path>, a: &SweepArgs) -> Result<()> {
    let p = prepare(config, &a.data, &a.model, &a.train)?;
    let grid = a.grid.clone().unwrap_or_else(default_grid);
    let points = sweep(&p.examples, a.parameter, &grid, a.variant, &p.cfg.model, &p.cfg.train)?;
    let mut out = OutputDir::create(&a.out_dir)?;
    out.write("sweep.csv", sweep_csv(&points))?;
    out.commit(
        "sweep",
        json!({
            "parameter": a.parameter,
            "grid": grid,
            "variant": a.variant,
            "config": p.cfg,
            "seeds": seeds(&p.cfg),
            "inputs": p.inputs,
        }),
    )
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let (model, labels) = Model::load_checkpoint(&a.checkpoint)?;
    let emb_path = a.embeddings.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("embeddings.txt")
    });
    let table = EmbeddingTable::load_word2vec_text(&emb_path)?;
    if table.dim() != model.config.embed_dim {
        bail!(
            "checkpoint expects {}-dimensional embeddings, {} has {}",
            model.config.embed_dim,
            emb_path.display(),
            table.dim()
        );
    }
    let (docs, _) = load_corpus(&a.corpus)?;
    let placeholder = labels.name(0).context("checkpoint has no labels")?.to_string();
    // Every non-empty sentence becomes an instance; gold labels are kept aside.
    let gold: HashMap<(&str, usize), Option<&str>> = docs
        .iter()
        .flat_map(|d| {
            d.sentences
                .iter()
                .enumerate()
                .map(move |(i, s)| ((d.doc_id.as_str(), i), s.label.as_deref()))
        })
        .collect();
    let relabeled: Vec<_> = docs
        .iter()
        .map(|d| {
            let mut d = d.clone();
            for s in &mut d.sentences {
                s.label = (!s.tokens.is_empty()).then(|| placeholder.clone());
            }
            d
        })
        .collect();
    let context = a.context.map(ContextMode::from).unwrap_or(ContextMode::Adjacent);
    let instances = build_instances(&relabeled, &labels, context)?;
    let examples = embed_instances(&table, &instances);

    let mut lines = String::new();
    let (mut scored, mut correct) = (0usize, 0usize);
    for (inst, ex) in instances.iter().zip(&examples) {
        let probs = model.predict(ex)?;
        let predicted = labels.name(argmax(&probs)).unwrap_or_default();
        let g = gold[&(inst.doc_id.as_str(), inst.sentence_index)];
        if let Some(g) = g {
            scored += 1;
            correct += usize::from(g == predicted);
        }
        let probabilities: serde_json::Map<String, serde_json::Value> = labels
            .labels
            .iter()
            .zip(probs.iter())
            .map(|(l, p)| (l.clone(), json!(p)))
            .collect();
        lines.push_str(&serde_json::to_string(&json!({
            "doc_id": inst.doc_id,
            "sentence_index": inst.sentence_index,
            "gold": g,
            "predicted": predicted,
            "probabilities": probabilities,
        }))?);
        lines.push('\n');
    }
    let mut out = OutputDir::create(&a.out_dir)?;
    out.write("predictions.jsonl", lines)?;
    let accuracy = (scored > 0).then(|| correct as f64 / scored as f64);
    if let Some(acc) = accuracy {
        log::info!("accuracy on {scored} labeled sentences: {acc:.4}");
    }
    out.commit(
        "predict",
        json!({
            "variant": model.variant,
            "context": context,
            "inputs": {
                "checkpoint": input_entry(&a.checkpoint)?,
                "embeddings": input_entry(&emb_path)?,
                "corpus": input_entry(&a.corpus)?,
            },
            "predictions": instances.len(),
            "labeled": scored,
            "accuracy": accuracy,
        }),
    )
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Synth(a) => cmd_synth(config, a),
        Command::Embed(a) => cmd_embed(config, a),
        Command::Train(a) => cmd_train(config, a),
        Command::Cv(a) => cmd_cv(config, a),
        Command::Sweep(a) => cmd_sweep(config, a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

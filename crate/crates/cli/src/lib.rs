//! Command-line pipeline (`select`, `train`, `eval`, `explain`, `serve`) over
//! precomputed embedding files.

pub mod payload;
pub mod service;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use adacbm_core::embedding_io::{write_concept_metadata, write_image_metadata};
use adacbm_core::evaluator::evaluate_inhibited;
use adacbm_core::synthetic::{generate, SyntheticConfig};
use adacbm_core::{
    evaluate, load_checkpoint, pair_dataset, read_concept_metadata, read_embedding_matrix,
    read_image_metadata, save_checkpoint, select_concepts, train, write_embedding_matrix,
    AdaCbmModel, ConceptBank, Dataset, DenominatorMode, ModelKind, Quantity, SelectionConfig,
    SelectionResult, TrainConfig, TrainedModel,
};
use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::payload::PredictionPayload;

#[derive(Debug, Parser)]
#[command(name = "adacbm", version, about = "Adaptive concept bottleneck models over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pick the k most useful concepts per class and write a selection JSON file.
    Select(SelectArgs),
    /// Train a classifier and write a checkpoint plus a JSONL epoch log.
    Train(TrainArgs),
    /// Print an accuracy report for a checkpoint on a labelled embedding set.
    Eval(EvalArgs),
    /// Show the top concept contributions behind one prediction.
    Explain(ExplainArgs),
    /// Print the model summary served at /api/model.
    Info(InfoArgs),
    /// Serve predictions, explanations and interventions over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic dataset and concept pool for trying the pipeline.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ImageInputs {
    #[arg(long)]
    pub image_emb: PathBuf,
    #[arg(long)]
    pub image_meta: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub images: ImageInputs,
    #[arg(long)]
    pub concept_emb: PathBuf,
    #[arg(long)]
    pub concept_meta: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value_t = TStat::Paper)]
    pub tstat: TStat,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TStat {
    Paper,
    Welch,
}

impl From<TStat> for DenominatorMode {
    fn from(t: TStat) -> Self {
        match t {
            TStat::Paper => DenominatorMode::Paper,
            TStat::Welch => DenominatorMode::Welch,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Adacbm,
    Linear,
    Labo,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Adacbm => ModelKind::AdaCbm,
            KindArg::Linear => ModelKind::LinearProbe,
            KindArg::Labo => ModelKind::LaboHead,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub selection: Option<PathBuf>,
    #[command(flatten)]
    pub images: ImageInputs,
    #[arg(long)]
    pub concept_emb: Option<PathBuf>,
    #[arg(long)]
    pub concept_meta: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindArg::Adacbm)]
    pub model: KindArg,
    /// Adapter depth.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated class names, in label order.
    #[arg(long, value_delimiter = ',')]
    pub class_names: Option<Vec<String>>,
    /// Number of classes when training without a selection file.
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InhibitArg {
    ImageNorm,
    TextNorm,
    Cosine,
}

impl From<InhibitArg> for Quantity {
    fn from(q: InhibitArg) -> Self {
        match q {
            InhibitArg::ImageNorm => Quantity::ImageNorm,
            InhibitArg::TextNorm => Quantity::TextNorm,
            InhibitArg::Cosine => Quantity::Cosine,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub images: ImageInputs,
    #[arg(long, value_enum)]
    pub inhibit: Option<InhibitArg>,
    /// Also write the confusion matrix as CSV.
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, requires_all = ["image_meta", "image_id"])]
    pub image_emb: Option<PathBuf>,
    #[arg(long)]
    pub image_meta: Option<PathBuf>,
    #[arg(long, conflicts_with = "vector")]
    pub image_id: Option<String>,
    /// Comma-separated embedding values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub vector: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    pub topk: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Concept ids to drop before predicting.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, requires = "browse_meta")]
    pub browse_emb: Option<PathBuf>,
    #[arg(long, requires = "browse_emb")]
    pub browse_meta: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory of frontend assets served for non-API paths.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Images lie along their class's concept directions.
    Planted,
    /// Images are rotated away from the concept directions.
    Rotated,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Rotated)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the number of training images per class.
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Select(a) => cmd_select(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Info(a) => cmd_info(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

/// Writes to stdout; a reader that hung up early (`| head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn load_dataset(emb: &Path, meta: &Path, n_classes: Option<usize>) -> anyhow::Result<Dataset> {
    let matrix = read_embedding_matrix(emb)?;
    let records = read_image_metadata(meta)?;
    let n = match n_classes {
        Some(n) => n,
        None => records.iter().map(|r| r.label + 1).max().unwrap_or(0),
    };
    Ok(pair_dataset(matrix, records, n)?)
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_select(a: SelectArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.images.image_emb, &a.images.image_meta, a.n_classes)?;
    let pool = read_embedding_matrix(&a.concept_emb)?;
    let records = read_concept_metadata(&a.concept_meta)?;
    let cfg = SelectionConfig {
        k: a.k,
        gamma: a.gamma,
        mode: a.tstat.into(),
    };
    let sel = select_concepts(&ds, &pool, &records, &cfg)?;
    for w in &sel.warnings {
        warn(w);
    }
    write_file(&a.out, sel.to_json()?.as_bytes())
}

/// `model.ckpt` logs to `model.log.jsonl`.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.jsonl")
}

pub fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let kind: ModelKind = a.model.into();
    let selection = match (&a.selection, kind) {
        (Some(_), ModelKind::LinearProbe) => {
            warn("--model linear ignores --selection");
            None
        }
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(SelectionResult::from_json(&text)?)
        }
        (None, ModelKind::LinearProbe) => None,
        (None, _) => bail!("--model {kind} needs --selection"),
    };
    let n_classes = selection.as_ref().map(|s| s.n_classes()).or(a.n_classes);
    let ds = load_dataset(&a.images.image_emb, &a.images.image_meta, n_classes)?;

    let bank = match &selection {
        Some(sel) => {
            let (Some(emb), Some(meta)) = (&a.concept_emb, &a.concept_meta) else {
                bail!("--selection needs --concept-emb and --concept-meta");
            };
            let pool = read_embedding_matrix(emb)?;
            let records = read_concept_metadata(meta)?;
            Some(ConceptBank::from_selection(sel, &pool, &records)?)
        }
        None => None,
    };
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: a.epochs,
        lr0: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        seed: a.seed,
        adapter_layers: a.layers,
        k: selection.as_ref().map_or(defaults.k, |s| s.k),
        denominator_mode: selection.as_ref().map_or(defaults.denominator_mode, |s| s.mode),
        model_kind: kind,
        ..defaults
    };
    let outcome = train(&ds, bank.as_ref(), &config)?;
    let mut model = outcome.model;
    if let Some(names) = a.class_names {
        model.set_class_names(names)?;
    }
    if let Some(sel) = &selection {
        model.set_selection_summary(sel);
    }

    save_checkpoint(&model, &a.out)?;
    let mut log = Vec::new();
    for entry in &outcome.log {
        serde_json::to_writer(&mut log, entry)?;
        log.push(b'\n');
    }
    write_file(&log_path(&a.out), &log)?;
    if let Some(last) = outcome.log.last() {
        eprintln!(
            "trained {kind} for {} epochs: loss {:.4}, train accuracy {:.4}",
            outcome.log.len(),
            last.mean_loss,
            last.train_acc
        );
    }
    Ok(())
}

fn require_adacbm(model: &TrainedModel) -> anyhow::Result<&AdaCbmModel> {
    model
        .as_adacbm()
        .with_context(|| format!("this needs an adacbm checkpoint, got {}", model.kind()))
}

pub fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.model)?;
    let ds = load_dataset(&a.images.image_emb, &a.images.image_meta, Some(model.n_classes()))?;
    let report = match a.inhibit {
        Some(q) => evaluate_inhibited(require_adacbm(&model)?, &ds, q.into())?,
        None => evaluate(&model, &ds)?,
    };
    if let Some(path) = &a.confusion_csv {
        write_file(path, report.confusion_csv().as_bytes())?;
    }
    emit(&serde_json::to_string_pretty(&report)?)
}

/// Output of `explain --format json`.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct Explanation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub predicted_name: String,
    #[serde(flatten)]
    pub prediction: PredictionPayload,
    /// Highest contributions to the predicted class.
    pub top: Vec<payload::TermPayload>,
}

fn explain_input(a: &ExplainArgs, d: usize) -> anyhow::Result<Vec<f64>> {
    let x = match (&a.vector, &a.image_emb, &a.image_meta, &a.image_id) {
        (Some(v), None, _, None) => v.clone(),
        (None, Some(emb), Some(meta), Some(id)) => {
            let matrix = read_embedding_matrix(emb)?;
            let records = read_image_metadata(meta)?;
            ensure!(
                matrix.rows() == records.len(),
                "{} has {} rows but {} lists {} images",
                emb.display(),
                matrix.rows(),
                meta.display(),
                records.len()
            );
            let i = records
                .iter()
                .position(|r| &r.id == id)
                .with_context(|| format!("unknown image id {id:?}"))?;
            matrix.row_f64(i)
        }
        _ => bail!("give either --vector or --image-emb, --image-meta and --image-id"),
    };
    ensure!(x.len() == d, "input has {} values, model expects d = {d}", x.len());
    Ok(x)
}

pub fn cmd_explain(a: ExplainArgs) -> anyhow::Result<()> {
    let checkpoint = load_checkpoint(&a.model)?;
    let model = require_adacbm(&checkpoint)?;
    let x = explain_input(&a, model.dim())?;
    let prediction = if a.exclude.is_empty() {
        payload::predict(model, &x)?
    } else {
        payload::intervene(model, &x, &a.exclude)?
    };
    let class = prediction.predicted_class;
    let top: Vec<_> = prediction.top(class, a.topk).into_iter().cloned().collect();
    let out = Explanation {
        image_id: a.image_id.clone(),
        predicted_name: model.metadata().class_names[class].clone(),
        prediction,
        top,
    };
    match a.format {
        Format::Json => emit(&serde_json::to_string_pretty(&out)?),
        Format::Text => {
            let mut text = Vec::new();
            write_explanation(&mut text, &out)?;
            emit(String::from_utf8_lossy(&text).trim_end())
        }
    }
}

fn write_explanation(w: &mut impl std::io::Write, e: &Explanation) -> std::io::Result<()> {
    let p = &e.prediction;
    let class = p.predicted_class;
    if let Some(id) = &e.image_id {
        write!(w, "{id}: ")?;
    }
    writeln!(
        w,
        "predicted {} (class {class}, p = {:.4}, logit = {:.4})",
        e.predicted_name, p.probs[class], p.logits[class]
    )?;
    if let Some(delta) = &p.delta_logits {
        let shown: Vec<String> = delta.iter().map(|v| format!("{v:+.4}")).collect();
        writeln!(w, "logit change from exclusions: [{}]", shown.join(", "))?;
    }
    writeln!(
        w,
        "{:>4}  {:>12}  {:>8}  {:>9}  {:>9}  {:>9}  concept",
        "rank", "contribution", "cosine", "|F(x)|", "|t|", "shift"
    )?;
    for (r, t) in e.top.iter().enumerate() {
        writeln!(
            w,
            "{:>4}  {:>12.4}  {:>8.4}  {:>9.4}  {:>9.4}  {:>9.4}  {} ({})",
            r + 1,
            t.contribution,
            t.cosine,
            t.image_norm,
            t.text_norm,
            t.shift,
            t.text,
            t.concept_id
        )?;
    }
    Ok(())
}

pub fn cmd_info(a: InfoArgs) -> anyhow::Result<()> {
    let checkpoint = load_checkpoint(&a.model)?;
    let model = require_adacbm(&checkpoint)?;
    emit(&serde_json::to_string_pretty(&payload::model_summary(model))?)
}

/// Loads the checkpoint and optional browse set into the shared service state.
pub fn serve_state(a: &ServeArgs) -> anyhow::Result<service::ServeState> {
    let checkpoint = load_checkpoint(&a.model)?;
    let TrainedModel::AdaCbm(model) = checkpoint else {
        bail!("serving needs an adacbm checkpoint, got {}", checkpoint.kind());
    };
    let browse = match (&a.browse_emb, &a.browse_meta) {
        (Some(emb), Some(meta)) => Some(load_dataset(emb, meta, Some(model.n_classes()))?),
        _ => None,
    };
    service::ServeState::new(model, browse)
}

pub fn cmd_serve(a: ServeArgs) -> anyhow::Result<()> {
    let state = Arc::new(serve_state(&a)?);
    if let Some(dir) = &a.static_dir {
        ensure!(dir.is_dir(), "--static {} is not a directory", dir.display());
    }
    let app = service::router(state, a.static_dir.as_deref());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}

pub fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match a.preset {
        Preset::Planted => SyntheticConfig {
            seed: a.seed,
            ..Default::default()
        },
        Preset::Rotated => SyntheticConfig::rotated_domain(a.seed),
    };
    if let Some(n) = a.train_per_class {
        cfg.train_per_class = n;
    }
    if let Some(n) = a.test_per_class {
        cfg.test_per_class = n;
    }
    let data = generate(&cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = &a.out_dir;
    for (name, ds) in [("train", &data.train), ("test", &data.test)] {
        write_embedding_matrix(ds.embeddings(), dir.join(format!("{name}.aemb")))?;
        write_image_metadata(ds.records(), dir.join(format!("{name}.jsonl")))?;
    }
    write_embedding_matrix(&data.concepts, dir.join("concepts.aemb"))?;
    write_concept_metadata(&data.concept_records, dir.join("concepts.jsonl"))?;
    eprintln!(
        "wrote {} train / {} test images and {} concepts to {}",
        data.train.len(),
        data.test.len(),
        data.concepts.rows(),
        dir.display()
    );
    Ok(())
}

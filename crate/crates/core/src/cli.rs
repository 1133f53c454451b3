//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 for invalid input or usage, 2 for runtime failures.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{CdmError, Result};
use crate::explain::{class_relevance, evaluate, explain_example};
use crate::grad::GradcheckInstance;
use crate::model::Hyperparams;
use crate::store::{load_container, save_container, ConceptSet, Container, EmbeddingMatrix, LabeledDataset};
use crate::synth::{generate, SynthSpec};
use crate::train::{
    ablate, fit, fit_split, load_checkpoint, read_grid, save_checkpoint, write_ablation, write_json,
    TrainConfig,
};
use crate::variational::Relaxation;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "cdm", version, about = "Concept discovery models over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint directory
    Train(TrainArgs),
    /// Accuracy and sparsity of a checkpoint on a labelled set
    Eval(EvalArgs),
    /// Per-concept contributions behind one prediction
    Explain(ExplainArgs),
    /// Per-class mean gate probabilities
    Relevance(RelevanceArgs),
    /// Train once per (alpha, beta, lr) row of a grid file
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a planted-concept synthetic dataset
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CDME file with image embeddings (a dataset or a plain matrix)
    #[arg(long)]
    pub images: PathBuf,
    /// CDME dataset supplying labels; defaults to --images
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// CDME concepts file
    #[arg(long)]
    pub concepts: PathBuf,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    /// Adam step size for the classifier weights
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    /// Learning-rate multiplier for the gate weights
    #[arg(long, default_value_t = 10.0)]
    pub ws_lr_mult: f64,
    /// Prior probability that a concept is active
    #[arg(long, default_value_t = 1e-4)]
    pub alpha: f64,
    /// Weight of the KL term
    #[arg(long, default_value_t = 1e-4)]
    pub beta: f64,
    /// Relaxation temperature
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train the plain linear classifier without concept gates
    #[arg(long)]
    pub no_gates: bool,
    /// Relaxed Bernoulli form: standard (logit location) or log-prob (log-probability location)
    #[arg(long, default_value = "standard", value_parser = parse_relaxation)]
    pub relaxation: Relaxation,
}

impl HyperArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            ws_lr_multiplier: self.ws_lr_mult,
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            use_gates: !self.no_gates,
            relaxation: self.relaxation,
            ..TrainConfig::default()
        }
    }
}

fn parse_relaxation(s: &str) -> std::result::Result<Relaxation, String> {
    s.parse().map_err(|e: CdmError| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Separate validation dataset; without it a seeded stratified 90/10 split is used
    #[arg(long)]
    pub val_images: Option<PathBuf>,
    /// Output checkpoint directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Hard gate samples to average over
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image_index: usize,
    /// CDME file with image embeddings (a dataset or a plain matrix)
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub concepts: PathBuf,
    /// Active concepts to print
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for explanation.json and contributions.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RelevanceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// CSV output path; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// CSV with header alpha,beta,lr
    #[arg(long)]
    pub grid_file: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub val_images: Option<PathBuf>,
    /// CSV output path; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 7)]
    pub m: usize,
    #[arg(long, default_value_t = 3)]
    pub c: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value = "standard", value_parser = parse_relaxation)]
    pub relaxation: Relaxation,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub concepts_per_class: usize,
    /// Total number of images
    #[arg(long, default_value_t = 800)]
    pub n: usize,
    /// Embedding dimension
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Per-coordinate standard deviation of the image noise
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for dataset.cdme and concepts.cdme
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn configure_threads() {
    let threads = std::env::var("CDM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    // the global pool can only be built once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Relevance(a) => cmd_relevance(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn load_labeled(images: &Path, labels: Option<&Path>) -> Result<LabeledDataset> {
    let image_container = load_container(images)?;
    let Some(labels) = labels.filter(|l| *l != images) else {
        return image_container.into_dataset();
    };
    let labelled = load_container(labels)?.into_dataset()?;
    let embeddings = image_container.into_embeddings()?;
    if embeddings.rows() != labelled.len() {
        return Err(CdmError::DimMismatch(format!(
            "{} images but {} labels",
            embeddings.rows(),
            labelled.len()
        )));
    }
    LabeledDataset::new(embeddings, labelled.labels().to_vec(), labelled.class_names().to_vec())
}

fn load_concepts(path: &Path) -> Result<ConceptSet> {
    load_container(path)?.into_concepts()
}

fn load_data(args: &DataArgs) -> Result<(LabeledDataset, ConceptSet)> {
    Ok((
        load_labeled(&args.images, args.labels.as_deref())?,
        load_concepts(&args.concepts)?,
    ))
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let (data, concepts) = load_data(&args.data)?;
    let cfg = args.hyper.config();
    let (model, mut report) = match &args.val_images {
        Some(val_path) => {
            let val = load_container(val_path)?.into_dataset()?;
            fit(&data, &val, &concepts, &cfg)?
        }
        None => fit_split(&data, &concepts, &cfg)?,
    };
    save_checkpoint(
        &args.out,
        &model,
        &cfg,
        &mut report,
        data.class_names(),
        concepts.names(),
    )?;
    println!(
        "trained {} epochs in {:.2}s; best epoch {}: val accuracy {:.4}, sparsity {:.2}%",
        report.epochs.len(),
        report.wall_clock_secs,
        report.best_epoch.map_or_else(|| "-".to_string(), |e| e.to_string()),
        report.best.accuracy,
        report.best.sparsity_percent
    );
    println!("checkpoint written to {}", args.out.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&args.model)?;
    let (data, concepts) = load_data(&args.data)?;
    let e = evaluate(&data, &concepts, &ckpt.model, args.seed, args.samples)?;
    let out = serde_json::json!({
        "accuracy": e.accuracy,
        "sparsity_percent": e.sparsity_percent,
        "samples": args.samples,
        "examples": data.len(),
    });
    println!("{out}");
    Ok(0)
}

fn cmd_explain(args: ExplainArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&args.model)?;
    let (embeddings, truth): (EmbeddingMatrix, Option<usize>) = match load_container(&args.images)? {
        Container::Dataset(d) => {
            let truth = d.labels().get(args.image_index).copied();
            (d.embeddings().clone(), truth)
        }
        other => (other.into_embeddings()?, None),
    };
    if args.image_index >= embeddings.rows() {
        return Err(CdmError::ShapeError(format!(
            "image index {} out of range for {} images",
            args.image_index,
            embeddings.rows()
        )));
    }
    let concepts = load_concepts(&args.concepts)?;
    // row i of a dataset-wide evaluation draws from seed ^ i
    let seed = args.seed ^ args.image_index as u64;
    let report = explain_example(
        &embeddings.ids()[args.image_index],
        embeddings.row(args.image_index),
        truth,
        &concepts,
        &ckpt.model,
        seed,
    )?;
    print!("{}", report.render_text(&ckpt.meta.class_names, args.top_k));
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| CdmError::io(dir, e))?;
        write_json(&dir.join("explanation.json"), &report)?;
        let csv_path = dir.join("contributions.csv");
        let file = fs::File::create(&csv_path).map_err(|e| CdmError::io(&csv_path, e))?;
        report.write_csv(file)?;
    }
    Ok(0)
}

fn cmd_relevance(args: RelevanceArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&args.model)?;
    let (data, concepts) = load_data(&args.data)?;
    let relevance = class_relevance(&data, &concepts, &ckpt.model)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let to_err = |e: csv::Error| CdmError::io("relevance csv", io::Error::other(e));
        let mut header = vec!["class".to_string()];
        header.extend(concepts.names().iter().cloned());
        w.write_record(&header).map_err(to_err)?;
        for (c, name) in data.class_names().iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(relevance.row(c).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| CdmError::io("relevance csv", e))?;
    }
    emit(args.out.as_deref(), &buf)?;
    Ok(0)
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let grid_file = fs::File::open(&args.grid_file).map_err(|e| CdmError::io(&args.grid_file, e))?;
    let grid = read_grid(grid_file)?;
    let (data, concepts) = load_data(&args.data)?;
    let base = args.hyper.config();
    let (train, val) = match &args.val_images {
        Some(p) => (data, load_container(p)?.into_dataset()?),
        None => crate::train::split_train_val(&data, 0.1, base.seed)?,
    };
    let rows = ablate(&train, &val, &concepts, &base, &grid)?;
    for row in &rows {
        if let Err(e) = &row.outcome {
            eprintln!(
                "warning: alpha={} beta={} lr={} failed: {e}",
                row.point.alpha, row.point.beta, row.point.lr
            );
        }
    }
    let mut buf = Vec::new();
    write_ablation(&rows, &mut buf)?;
    emit(args.out.as_deref(), &buf)?;
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let hp = Hyperparams {
        alpha: args.alpha,
        beta: args.beta,
        tau: args.tau,
    };
    let inst = GradcheckInstance::random(args.n, args.k, args.m, args.c, args.seed, hp)?;
    let err = inst.check(args.relaxation, args.h)?;
    let pass = err < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {err:.3e} ({})",
        if pass { "ok" } else { "FAILED" }
    );
    Ok(if pass { 0 } else { 2 })
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let spec = SynthSpec {
        classes: args.classes,
        concepts_per_class: args.concepts_per_class,
        n: args.n,
        dim: args.k,
        noise_sigma: args.sigma,
        seed: args.seed,
    };
    let (data, concepts) = generate(&spec)?;
    fs::create_dir_all(&args.out).map_err(|e| CdmError::io(&args.out, e))?;
    let data_path = args.out.join("dataset.cdme");
    let concepts_path = args.out.join("concepts.cdme");
    save_container(&data, &data_path)?;
    save_container(&concepts, &concepts_path)?;
    println!("{}", data_path.display());
    println!("{}", concepts_path.display());
    Ok(0)
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| CdmError::io(p, e)),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| CdmError::io("stdout", e)),
    }
}

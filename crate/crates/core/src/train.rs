//! Minibatch Adam training, checkpoints and hyperparameter sweeps.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};
use crate::explain::{evaluate_with, Evaluation};
use crate::grad::{loss_and_gradients_with, GateMode};
use crate::model::{cosine_similarity, CdmModel, Hyperparams};
use crate::optim::{Adam, AdamParams};
use crate::store::{load_container, save_container, ConceptSet, LabeledDataset, WeightMatrix};
use crate::variational::{derive_seed, sample_logistic, Relaxation};

/// Stream offsets so shuffling, per-step noise and evaluation never share
/// random numbers.
const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;
const EVAL_STREAM: u64 = 0x6576_616c_0000_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Adam step size for the classifier weights.
    pub learning_rate: f64,
    /// Gate weights use `learning_rate * ws_lr_multiplier`.
    pub ws_lr_multiplier: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_gates: bool,
    pub relaxation: Relaxation,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            ws_lr_multiplier: 10.0,
            alpha: 1e-4,
            beta: 1e-4,
            tau: 0.1,
            epochs: 500,
            batch_size: 256,
            seed: 0,
            use_gates: true,
            relaxation: Relaxation::Standard,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CdmError::ConfigError(format!("{name} must be > 0, got {v}")))
            }
        };
        positive(self.learning_rate, "learning rate")?;
        positive(self.ws_lr_multiplier, "W_s learning-rate multiplier")?;
        if self.batch_size == 0 {
            return Err(CdmError::ConfigError("batch size must be > 0".into()));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps.is_nan() || a.eps <= 0.0 {
            return Err(CdmError::ConfigError("invalid Adam parameters".into()));
        }
        match self.hyperparams().validate() {
            Err(CdmError::TemperatureError(t)) => Err(CdmError::ConfigError(format!(
                "temperature must be > 0, got {t}"
            ))),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_sparsity_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose weights were kept (highest validation accuracy, latest on
    /// ties); `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best: Evaluation,
    /// How the validation set was obtained.
    pub split: String,
    /// Set when the model is written to disk.
    pub checkpoint: Option<String>,
    /// Not serialized, so that reports from identical runs are identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Stratified seeded split: roughly `val_fraction` of every class (at least
/// one example when the class has two or more) goes to validation.
pub fn split_train_val(
    data: &LabeledDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CdmError::ConfigError(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in 0..data.num_classes() {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == class).collect();
        members.shuffle(&mut rng);
        let mut take = (members.len() as f64 * val_fraction).round() as usize;
        if take == 0 && members.len() >= 2 {
            take = 1;
        }
        val_idx.extend_from_slice(&members[..take]);
        train_idx.extend_from_slice(&members[take..]);
    }
    if val_idx.is_empty() || train_idx.is_empty() {
        return Err(CdmError::ConfigError("dataset too small to split".into()));
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((data.select(&train_idx), data.select(&val_idx)))
}

/// Trains from zero-initialized weights and returns the epoch with the best
/// validation accuracy.
pub fn fit(
    train: &LabeledDataset,
    val: &LabeledDataset,
    concepts: &ConceptSet,
    cfg: &TrainConfig,
) -> Result<(CdmModel, TrainReport)> {
    fit_with_split(train, val, concepts, cfg, "provided")
}

pub(crate) fn fit_with_split(
    train: &LabeledDataset,
    val: &LabeledDataset,
    concepts: &ConceptSet,
    cfg: &TrainConfig,
    split: &str,
) -> Result<(CdmModel, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let k = concepts.embeddings().dim();
    if train.embeddings().dim() != k || val.embeddings().dim() != k {
        return Err(CdmError::DimMismatch(format!(
            "train dim {}, val dim {}, concept dim {k}",
            train.embeddings().dim(),
            val.embeddings().dim()
        )));
    }
    if train.class_names() != val.class_names() {
        return Err(CdmError::DimMismatch(
            "train and validation sets disagree on class names".into(),
        ));
    }
    if train.is_empty() || val.is_empty() || concepts.is_empty() {
        return Err(CdmError::ConfigError(
            "train, validation and concept sets must be nonempty".into(),
        ));
    }
    for (class, &count) in train.class_counts().iter().enumerate() {
        if count == 0 {
            log::warn!("class {class} ({}) has no training examples", train.class_names()[class]);
        }
    }

    let c = train.num_classes();
    let m = concepts.len();
    let mut model = CdmModel::zeros(c, m, k, cfg.hyperparams(), cfg.use_gates)?;
    let train_sims = cosine_similarity(train.embeddings(), concepts.embeddings())?;
    let val_sims = cosine_similarity(val.embeddings(), concepts.embeddings())?;
    let train_images = train.embeddings().matrix();

    let mut opt_c = Adam::new(c * m, cfg.learning_rate, cfg.adam);
    let mut opt_s = Adam::new(k * m, cfg.learning_rate * cfg.ws_lr_multiplier, cfg.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_seeds = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let eval_seed = derive_seed(cfg.seed, EVAL_STREAM);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_model = model.clone();
    let mut best: Option<(usize, Evaluation)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut ce_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let images = train_images.gather_rows(chunk);
            let sims = train_sims.select(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let noise;
            let mode = if cfg.use_gates {
                noise = sample_logistic(chunk.len(), m, noise_seeds.next_u64());
                GateMode::Relaxed {
                    noise: &noise,
                    relaxation: cfg.relaxation,
                }
            } else {
                GateMode::Off
            };
            let pack = match loss_and_gradients_with(&images, &sims, &labels, &model, mode) {
                Ok(p) => p,
                Err(CdmError::NonFinite(_)) => return Err(CdmError::DivergenceError { epoch, step }),
                Err(e) => return Err(e),
            };
            opt_c.step(&mut model.w_c, &pack.grad_w_c);
            if cfg.use_gates {
                opt_s.step(&mut model.w_s, &pack.grad_w_s);
            }
            if !model.w_c.is_finite() || !model.w_s.is_finite() {
                return Err(CdmError::DivergenceError { epoch, step });
            }
            let b = chunk.len() as f64;
            loss_sum += pack.loss_value * b;
            ce_sum += pack.ce_value * b;
            kl_sum += pack.kl_value * b;
            step += 1;
        }
        let n = train.len() as f64;
        let train_eval = evaluate_with(train.embeddings(), &train_sims, train.labels(), &model, eval_seed, 1)?;
        let val_eval = evaluate_with(val.embeddings(), &val_sims, val.labels(), &model, eval_seed, 1)?;
        history.push(EpochMetrics {
            epoch,
            loss: loss_sum / n,
            ce: ce_sum / n,
            kl: kl_sum / n,
            train_accuracy: train_eval.accuracy,
            val_accuracy: val_eval.accuracy,
            val_sparsity_percent: val_eval.sparsity_percent,
        });
        if best.is_none_or(|(_, b)| val_eval.accuracy >= b.accuracy) {
            best = Some((epoch, val_eval));
            best_model = model.clone();
        }
        log::debug!(
            "epoch {epoch}: loss {:.5} val acc {:.4} sparsity {:.2}%",
            loss_sum / n,
            val_eval.accuracy,
            val_eval.sparsity_percent
        );
    }

    let best_eval = match best {
        Some((_, e)) => e,
        None => evaluate_with(val.embeddings(), &val_sims, val.labels(), &best_model, eval_seed, 1)?,
    };
    let report = TrainReport {
        epochs: history,
        best_epoch: best.map(|(e, _)| e),
        best: best_eval,
        split: split.to_string(),
        checkpoint: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_model, report))
}

/// Splits `data` 90/10 with a seeded stratified split, then trains.
pub fn fit_split(
    data: &LabeledDataset,
    concepts: &ConceptSet,
    cfg: &TrainConfig,
) -> Result<(CdmModel, TrainReport)> {
    let (train, val) = split_train_val(data, 0.1, cfg.seed)?;
    fit_with_split(&train, &val, concepts, cfg, &format!("seeded 90/10 (seed {})", cfg.seed))
}

/// Everything needed to reload a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub num_concepts: usize,
    pub embed_dim: usize,
    pub gated: bool,
    pub class_names: Vec<String>,
    pub concept_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CdmModel,
    pub meta: ModelMeta,
}

pub const W_C_FILE: &str = "w_c.cdme";
pub const W_S_FILE: &str = "w_s.cdme";
pub const META_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.json";

/// Writes `w_c.cdme`, `w_s.cdme`, `model.json` and `report.json` into `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &CdmModel,
    cfg: &TrainConfig,
    report: &mut TrainReport,
    class_names: &[String],
    concept_names: &[String],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CdmError::io(dir, e))?;
    let w_c = WeightMatrix::new(model.w_c.clone(), class_names.to_vec())?;
    let w_s = WeightMatrix::new(
        model.w_s.clone(),
        (0..model.embed_dim()).map(|k| format!("dim{k}")).collect(),
    )?;
    save_container(&w_c, dir.join(W_C_FILE))?;
    save_container(&w_s, dir.join(W_S_FILE))?;
    let meta = ModelMeta {
        config: cfg.clone(),
        num_classes: model.num_classes(),
        num_concepts: model.num_concepts(),
        embed_dim: model.embed_dim(),
        gated: model.gated,
        class_names: class_names.to_vec(),
        concept_names: concept_names.to_vec(),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    report.checkpoint = Some(format!("{W_C_FILE},{W_S_FILE}"));
    write_json(&dir.join(REPORT_FILE), report)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let mut text = String::new();
    fs::File::open(&meta_path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| CdmError::io(&meta_path, e))?;
    let meta: ModelMeta =
        serde_json::from_str(&text).map_err(|e| CdmError::Header(format!("{META_FILE}: {e}")))?;
    let w_c = load_container(dir.join(W_C_FILE))?.into_weights()?.into_matrix();
    let w_s = load_container(dir.join(W_S_FILE))?.into_weights()?.into_matrix();
    if w_c.shape() != (meta.num_classes, meta.num_concepts)
        || w_s.shape() != (meta.embed_dim, meta.num_concepts)
    {
        return Err(CdmError::ShapeError(
            "checkpoint weights disagree with model.json".into(),
        ));
    }
    let model = CdmModel::new(w_c, w_s, meta.config.hyperparams(), meta.gated)?;
    Ok(Checkpoint { model, meta })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CdmError::Header(e.to_string()))?;
    bytes.push(b'\n');
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| CdmError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct AblationRow {
    pub point: GridPoint,
    /// Best validation accuracy and sparsity, both in percent.
    pub outcome: Result<(f64, f64)>,
}

/// One fit per grid point, all with `base.seed`. A failing point is reported
/// in its row and does not stop the others.
pub fn ablate(
    train: &LabeledDataset,
    val: &LabeledDataset,
    concepts: &ConceptSet,
    base: &TrainConfig,
    grid: &[GridPoint],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(CdmError::ConfigError("ablation grid is empty".into()));
    }
    Ok(grid
        .par_iter()
        .map(|&point| {
            let cfg = TrainConfig {
                alpha: point.alpha,
                beta: point.beta,
                learning_rate: point.lr,
                ..base.clone()
            };
            let outcome = fit(train, val, concepts, &cfg)
                .map(|(_, r)| (100.0 * r.best.accuracy, r.best.sparsity_percent));
            AblationRow { point, outcome }
        })
        .collect())
}

/// Reads a CSV with header `alpha,beta,lr`.
pub fn read_grid(reader: impl Read) -> Result<Vec<GridPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut grid = Vec::new();
    for rec in rdr.deserialize() {
        grid.push(rec.map_err(|e| CdmError::ConfigError(format!("grid file: {e}")))?);
    }
    Ok(grid)
}

/// Writes `alpha,beta,lr,accuracy,sparsity`; failed rows leave the last two
/// columns empty.
pub fn write_ablation(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| CdmError::io("ablation csv", std::io::Error::other(e));
    w.write_record(["alpha", "beta", "lr", "accuracy", "sparsity"]).map_err(to_err)?;
    for row in rows {
        let (acc, sp) = match &row.outcome {
            Ok((a, s)) => (a.to_string(), s.to_string()),
            Err(_) => (String::new(), String::new()),
        };
        w.write_record([
            row.point.alpha.to_string(),
            row.point.beta.to_string(),
            row.point.lr.to_string(),
            acc,
            sp,
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| CdmError::io("ablation csv", e))
}

//! Inference-time metrics and per-example explanations.
//!
//! A concept counts as active for an example when its hard gate sample is 1.
//! Sparsity is the fraction (or percentage) of active concepts.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};
use crate::linalg::Matrix;
use crate::model::{
    argmax, cosine_similarity, forward_base, forward_gated, gate_probabilities, CdmModel,
    SimilarityMatrix,
};
use crate::store::{ConceptSet, EmbeddingMatrix, LabeledDataset};
use crate::variational::{derive_seed, sample_hard_gate, GateSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Fraction of correct argmax predictions, in [0, 1].
    pub accuracy: f64,
    /// Mean percentage of active concepts per example, in [0, 100].
    pub sparsity_percent: f64,
}

pub fn evaluate(
    data: &LabeledDataset,
    concepts: &ConceptSet,
    model: &CdmModel,
    seed: u64,
    samples: usize,
) -> Result<Evaluation> {
    check_dims(data.embeddings(), concepts, model)?;
    let sims = cosine_similarity(data.embeddings(), concepts.embeddings())?;
    evaluate_with(data.embeddings(), &sims, data.labels(), model, seed, samples)
}

/// [`evaluate`] with similarities already computed.
pub fn evaluate_with(
    images: &EmbeddingMatrix,
    sims: &SimilarityMatrix,
    labels: &[usize],
    model: &CdmModel,
    seed: u64,
    samples: usize,
) -> Result<Evaluation> {
    if samples == 0 {
        return Err(CdmError::ConfigError("samples must be >= 1".into()));
    }
    if labels.is_empty() {
        return Err(CdmError::ShapeError("cannot evaluate an empty dataset".into()));
    }
    if sims.rows() != labels.len() || images.rows() != labels.len() {
        return Err(CdmError::DimMismatch(format!(
            "{} labels, {} similarity rows, {} images",
            labels.len(),
            sims.rows(),
            images.rows()
        )));
    }
    let n = labels.len() as f64;
    let m = model.num_concepts() as f64;
    let probs = if model.gated {
        Some(gate_probabilities(images, model)?)
    } else {
        None
    };

    let mut acc_total = 0.0;
    let mut sparsity_total = 0.0;
    for j in 0..samples {
        let (logits, active) = match &probs {
            Some(p) => {
                let gates = sample_hard_gate(p, derive_seed(seed, j as u64));
                let active: usize = (0..labels.len()).map(|i| gates.active_count(i)).sum();
                (forward_gated(sims, &gates, model)?, active as f64)
            }
            None => (forward_base(sims, model)?, n * m),
        };
        let correct = logits
            .predictions()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        acc_total += correct as f64 / n;
        sparsity_total += 100.0 * active / (n * m);
    }
    Ok(Evaluation {
        accuracy: acc_total / samples as f64,
        sparsity_percent: sparsity_total / samples as f64,
    })
}

/// Mean gate probability over all examples and concepts.
pub fn mean_gate_probability(images: &EmbeddingMatrix, model: &CdmModel) -> Result<f64> {
    Ok(gate_probabilities(images, model)?.mean())
}

/// Per-class mean presence probability, C×M.
pub fn class_relevance(
    data: &LabeledDataset,
    concepts: &ConceptSet,
    model: &CdmModel,
) -> Result<Matrix> {
    check_dims(data.embeddings(), concepts, model)?;
    if data.num_classes() != model.num_classes() {
        return Err(CdmError::DimMismatch(format!(
            "dataset has {} classes, model {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    let probs = gate_probabilities(data.embeddings(), model)?;
    let counts = data.class_counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(CdmError::EmptyClass(empty));
    }
    let mut sums = Matrix::zeros(model.num_classes(), model.num_concepts());
    for (i, &label) in data.labels().iter().enumerate() {
        for (acc, &p) in sums.row_mut(label).iter_mut().zip(probs.row(i)) {
            *acc += p;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        sums.row_mut(c).iter_mut().for_each(|v| *v /= count as f64);
    }
    Ok(sums)
}

fn check_dims(images: &EmbeddingMatrix, concepts: &ConceptSet, model: &CdmModel) -> Result<()> {
    if images.dim() != model.embed_dim() || concepts.embeddings().dim() != model.embed_dim() {
        return Err(CdmError::DimMismatch(format!(
            "image dim {}, concept dim {}, model embed dim {}",
            images.dim(),
            concepts.embeddings().dim(),
            model.embed_dim()
        )));
    }
    if concepts.len() != model.num_concepts() {
        return Err(CdmError::DimMismatch(format!(
            "{} concepts, model has {}",
            concepts.len(),
            model.num_concepts()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptContribution {
    pub name: String,
    pub gate: f64,
    pub similarity: f64,
    pub weight: f64,
    pub contribution: f64,
}

/// Signed decomposition of one prediction over concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub example_id: String,
    pub predicted: usize,
    pub truth: Option<usize>,
    pub sparsity_percent: f64,
    /// Every concept, by descending |contribution|; inactive concepts last.
    pub concepts: Vec<ConceptContribution>,
}

impl ExplanationReport {
    pub fn active(&self) -> impl Iterator<Item = &ConceptContribution> {
        self.concepts.iter().filter(|c| c.gate == 1.0)
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    /// Fraction of active concepts.
    pub fn sparsity(&self) -> f64 {
        self.sparsity_percent / 100.0
    }

    pub fn positive_total(&self) -> f64 {
        self.concepts.iter().map(|c| c.contribution.max(0.0)).sum()
    }

    pub fn negative_total(&self) -> f64 {
        self.concepts.iter().map(|c| c.contribution.min(0.0)).sum()
    }

    /// Sum of all contributions; equals the predicted-class logit.
    pub fn total(&self) -> f64 {
        self.concepts.iter().map(|c| c.contribution).sum()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| CdmError::io("csv", std::io::Error::other(e));
        w.write_record(["concept", "gate", "similarity", "weight", "contribution"])
            .map_err(to_err)?;
        for c in &self.concepts {
            w.write_record([
                c.name.clone(),
                c.gate.to_string(),
                c.similarity.to_string(),
                c.weight.to_string(),
                c.contribution.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| CdmError::io("csv", e))
    }

    /// Aligned-column text of the `top_k` active concepts.
    pub fn render_text(&self, class_names: &[String], top_k: usize) -> String {
        let class = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "example     {}", self.example_id);
        let _ = writeln!(s, "predicted   {}", class(self.predicted));
        if let Some(t) = self.truth {
            let _ = writeln!(s, "truth       {}", class(t));
        }
        let _ = writeln!(
            s,
            "active      {} of {} ({:.2}%)",
            self.active_count(),
            self.concepts.len(),
            self.sparsity_percent
        );
        let _ = writeln!(
            s,
            "logit       {:.6}  (+{:.6} / {:.6})",
            self.total(),
            self.positive_total(),
            self.negative_total()
        );
        let width = self
            .active()
            .take(top_k)
            .map(|c| c.name.chars().count())
            .max()
            .unwrap_or(7)
            .max(7);
        let _ = writeln!(
            s,
            "{:<width$}  {:>10}  {:>10}  {:>12}  sign",
            "concept", "similarity", "weight", "contribution"
        );
        for c in self.active().take(top_k) {
            let sign = if c.contribution >= 0.0 { "+" } else { "-" };
            let _ = writeln!(
                s,
                "{:<width$}  {:>10.6}  {:>10.6}  {:>12.6}  {sign}",
                c.name, c.similarity, c.weight, c.contribution
            );
        }
        s
    }
}

/// Explains one image: draws a hard gate sample from `seed`, predicts, and
/// splits the predicted-class logit into per-concept contributions
/// `z_m · s_m · w_c[pred, m]`.
pub fn explain_example(
    example_id: &str,
    image: &[f64],
    truth: Option<usize>,
    concepts: &ConceptSet,
    model: &CdmModel,
    seed: u64,
) -> Result<ExplanationReport> {
    let row = EmbeddingMatrix::new(
        Matrix::from_vec(1, image.len(), image.to_vec())?,
        vec![example_id.to_string()],
    )?;
    check_dims(&row, concepts, model)?;
    let sims = cosine_similarity(&row, concepts.embeddings())?;
    let gates = if model.gated {
        sample_hard_gate(&gate_probabilities(&row, model)?, seed)
    } else {
        GateSample::ones(1, model.num_concepts())
    };
    let logits = forward_gated(&sims, &gates, model)?;
    let predicted = argmax(logits.values().row(0));

    let s = sims.values().row(0);
    let z = gates.values().row(0);
    let w = model.w_c.row(predicted);
    let mut items: Vec<(usize, ConceptContribution)> = concepts
        .names()
        .iter()
        .enumerate()
        .map(|(m, name)| {
            (
                m,
                ConceptContribution {
                    name: name.clone(),
                    gate: z[m],
                    similarity: s[m],
                    weight: w[m],
                    contribution: z[m] * s[m] * w[m],
                },
            )
        })
        .collect();
    items.sort_by(|(ia, a), (ib, b)| {
        let inactive = |c: &ConceptContribution| c.gate != 1.0;
        inactive(a)
            .cmp(&inactive(b))
            .then(b.contribution.abs().total_cmp(&a.contribution.abs()))
            .then(ia.cmp(ib))
    });
    let active = gates.active_count(0);
    Ok(ExplanationReport {
        example_id: example_id.to_string(),
        predicted,
        truth,
        sparsity_percent: 100.0 * active as f64 / model.num_concepts() as f64,
        concepts: items.into_iter().map(|(_, c)| c).collect(),
    })
}

//! Deterministic forward computations of the concept discovery model.

use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::store::EmbeddingMatrix;
use crate::variational::GateSample;

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

/// Gate logits beyond this magnitude saturate the clamped sigmoid.
pub fn logit_bound() -> f64 {
    ((1.0 - PROB_EPS) / PROB_EPS).ln()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Classifier weights `w_c` (C×M), gate weights `w_s` (K×M) and the
/// variational hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CdmModel {
    pub w_c: Matrix,
    pub w_s: Matrix,
    /// Prior Bernoulli probability of a concept being active.
    pub alpha: f64,
    /// KL weight.
    pub beta: f64,
    /// Relaxation temperature.
    pub tau: f64,
    /// When false the model is the plain linear classifier and gates are
    /// ignored everywhere.
    pub gated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CdmError::ConfigError(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CdmError::ConfigError(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CdmError::TemperatureError(self.tau));
        }
        Ok(())
    }
}

impl CdmModel {
    /// Zero-initialized model: uniform class scores, every gate at 0.5.
    pub fn zeros(
        num_classes: usize,
        num_concepts: usize,
        embed_dim: usize,
        hp: Hyperparams,
        gated: bool,
    ) -> Result<Self> {
        Self::new(
            Matrix::zeros(num_classes, num_concepts),
            Matrix::zeros(embed_dim, num_concepts),
            hp,
            gated,
        )
    }

    pub fn new(w_c: Matrix, w_s: Matrix, hp: Hyperparams, gated: bool) -> Result<Self> {
        hp.validate()?;
        if w_c.cols() != w_s.cols() {
            return Err(CdmError::ShapeError(format!(
                "w_c has {} concepts, w_s has {}",
                w_c.cols(),
                w_s.cols()
            )));
        }
        if w_c.rows() == 0 || w_c.cols() == 0 || w_s.rows() == 0 {
            return Err(CdmError::ShapeError("model dimensions must be > 0".into()));
        }
        if !w_c.is_finite() || !w_s.is_finite() {
            return Err(CdmError::NonFinite("model weights".into()));
        }
        Ok(CdmModel {
            w_c,
            w_s,
            alpha: hp.alpha,
            beta: hp.beta,
            tau: hp.tau,
            gated,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.w_c.rows()
    }

    pub fn num_concepts(&self) -> usize {
        self.w_c.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_s.rows()
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
        }
    }
}

/// Image-by-concept cosine similarities, N×M.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub(crate) Matrix);

impl SimilarityMatrix {
    /// Wraps raw similarities, checking they are finite cosines.
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(CdmError::NonFinite("similarity matrix".into()));
        }
        if values.as_slice().iter().any(|v| v.abs() > 1.0 + 1e-9) {
            return Err(CdmError::ShapeError(
                "similarities must lie in [-1, 1]".into(),
            ));
        }
        Ok(SimilarityMatrix(values))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn select(&self, indices: &[usize]) -> SimilarityMatrix {
        SimilarityMatrix(self.0.gather_rows(indices))
    }
}

/// Pre-softmax class scores, N×C.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub(crate) Matrix);

impl Logits {
    pub fn values(&self) -> &Matrix {
        &self.0
    }

    /// Argmax per row; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn cosine_similarity(
    images: &EmbeddingMatrix,
    concepts: &EmbeddingMatrix,
) -> Result<SimilarityMatrix> {
    if images.dim() != concepts.dim() {
        return Err(CdmError::DimMismatch(format!(
            "image dim {} != concept dim {}",
            images.dim(),
            concepts.dim()
        )));
    }
    let concept_norms: Vec<f64> = concepts.matrix().iter_rows().map(norm).collect();
    let values = Matrix::from_fn(images.rows(), concepts.rows(), |i, m| {
        let a = images.row(i);
        let b = concepts.row(m);
        // rows are unit norm only to 1e-4; divide so the result is a true cosine
        (dot(a, b) / (norm(a) * concept_norms[m])).clamp(-1.0, 1.0)
    });
    Ok(SimilarityMatrix(values))
}

/// `Y = S · W_cᵀ`.
pub fn forward_base(s: &SimilarityMatrix, model: &CdmModel) -> Result<Logits> {
    if s.cols() != model.num_concepts() {
        return Err(CdmError::DimMismatch(format!(
            "similarities have {} concepts, model has {}",
            s.cols(),
            model.num_concepts()
        )));
    }
    Ok(Logits(s.0.matmul_transposed(&model.w_c)?))
}

/// Raw gate logits `X · W_s`, N×M.
pub fn gate_logits(images: &Matrix, model: &CdmModel) -> Result<Matrix> {
    if images.cols() != model.embed_dim() {
        return Err(CdmError::DimMismatch(format!(
            "image dim {} != model embed dim {}",
            images.cols(),
            model.embed_dim()
        )));
    }
    images.matmul(&model.w_s)
}

/// Bernoulli gate probabilities `sigmoid(X · W_s)`, clamped into
/// `[1e-12, 1 - 1e-12]`.
pub fn gate_probabilities(images: &EmbeddingMatrix, model: &CdmModel) -> Result<Matrix> {
    Ok(gate_logits(images.matrix(), model)?.map(|a| clamp_prob(sigmoid(a))))
}

/// `Y = (Z ⊙ S) · W_cᵀ`.
pub fn forward_gated(
    s: &SimilarityMatrix,
    gates: &GateSample,
    model: &CdmModel,
) -> Result<Logits> {
    if gates.values().shape() != s.0.shape() {
        return Err(CdmError::DimMismatch(format!(
            "gates are {}x{}, similarities {}x{}",
            gates.values().rows(),
            gates.values().cols(),
            s.rows(),
            s.cols()
        )));
    }
    let effective = SimilarityMatrix(gates.values().hadamard(&s.0)?);
    forward_base(&effective, model)
}

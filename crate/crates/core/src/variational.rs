//! Stochastic gate machinery: logistic noise, the binary Concrete
//! relaxation used during training, hard Bernoulli sampling used at
//! inference, and the closed-form Bernoulli KL.
//!
//! Every random draw for row `i` comes from its own ChaCha stream seeded
//! with `seed ^ i`, so results do not depend on how rows are scheduled.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};
use crate::linalg::Matrix;
use crate::model::{clamp_prob, sigmoid, PROB_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Relaxed,
    Hard,
}

/// Per-example gate values `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    values: Matrix,
    kind: GateKind,
    seed: u64,
}

impl GateSample {
    pub fn new(values: Matrix, kind: GateKind, seed: u64) -> Result<Self> {
        let ok = match kind {
            GateKind::Relaxed => values.as_slice().iter().all(|&v| v > 0.0 && v < 1.0),
            GateKind::Hard => values.as_slice().iter().all(|&v| v == 0.0 || v == 1.0),
        };
        if !ok {
            return Err(CdmError::ShapeError(format!(
                "gate values violate the {kind:?} range"
            )));
        }
        Ok(GateSample { values, kind, seed })
    }

    /// All gates open.
    pub fn ones(rows: usize, cols: usize) -> Self {
        GateSample {
            values: Matrix::filled(rows, cols, 1.0),
            kind: GateKind::Hard,
            seed: 0,
        }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of open gates in row `i` (hard samples only make sense here).
    pub fn active_count(&self, i: usize) -> usize {
        self.values.row(i).iter().filter(|&&z| z == 1.0).count()
    }
}

/// Samples of the standard logistic distribution, `log U - log(1 - U)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticNoise {
    values: Matrix,
}

impl LogisticNoise {
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(CdmError::NonFinite("logistic noise".into()));
        }
        Ok(LogisticNoise { values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        LogisticNoise {
            values: Matrix::zeros(rows, cols),
        }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Which relaxed-Bernoulli parameterization to use during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relaxation {
    /// `sigmoid((log π - log(1-π) + L) / τ)`; recovers Bernoulli(π) as τ → 0.
    #[default]
    Standard,
    /// `sigmoid((log π + L) / τ)`, the literal log-probability variant.
    #[serde(rename = "log-prob")]
    LogProb,
}

impl FromStr for Relaxation {
    type Err = CdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Relaxation::Standard),
            "log-prob" => Ok(Relaxation::LogProb),
            other => Err(CdmError::ConfigError(format!(
                "unknown relaxation '{other}' (expected standard|log-prob)"
            ))),
        }
    }
}

impl fmt::Display for Relaxation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relaxation::Standard => "standard",
            Relaxation::LogProb => "log-prob",
        })
    }
}

impl Relaxation {
    /// Location term added to the logistic noise, as a function of π.
    #[inline]
    pub fn location(self, p: f64) -> f64 {
        let p = clamp_prob(p);
        match self {
            Relaxation::Standard => p.ln() - (1.0 - p).ln(),
            Relaxation::LogProb => p.ln(),
        }
    }
}

/// Derived seed for the `index`-th independent repetition. Index 0 is the
/// base seed itself.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub(crate) fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ row as u64)
}

/// Uniform draw strictly inside `(0, 1)`, clamped to `[1e-12, 1 - 1e-12]`.
#[inline]
pub(crate) fn open_uniform(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>().clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Inverse CDF of the standard logistic distribution.
#[inline]
pub fn logistic_from_uniform(u: f64) -> f64 {
    u.ln() - (1.0 - u).ln()
}

pub fn sample_logistic(rows: usize, cols: usize, seed: u64) -> LogisticNoise {
    let mut values = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut rng = row_rng(seed, i);
        for v in values.row_mut(i) {
            *v = logistic_from_uniform(open_uniform(&mut rng));
        }
    }
    LogisticNoise { values }
}

/// Binary Concrete sample `sigmoid((loc(π) + L) / τ)`, clamped into the
/// open unit interval.
pub fn sample_relaxed_gate(
    probs: &Matrix,
    noise: &LogisticNoise,
    tau: f64,
    relaxation: Relaxation,
) -> Result<GateSample> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CdmError::TemperatureError(tau));
    }
    if probs.shape() != noise.values.shape() {
        return Err(CdmError::DimMismatch(format!(
            "noise is {}x{}, probabilities {}x{}",
            noise.values.rows(),
            noise.values.cols(),
            probs.rows(),
            probs.cols()
        )));
    }
    let mut values = Matrix::zeros(probs.rows(), probs.cols());
    for ((z, &p), &l) in values
        .as_mut_slice()
        .iter_mut()
        .zip(probs.as_slice())
        .zip(noise.values.as_slice())
    {
        *z = clamp_prob(sigmoid((relaxation.location(p) + l) / tau));
    }
    Ok(GateSample {
        values,
        kind: GateKind::Relaxed,
        seed: 0,
    })
}

/// Hard Bernoulli draw: `z = 1` iff `U < π`.
pub fn sample_hard_gate(probs: &Matrix, seed: u64) -> GateSample {
    let mut values = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let mut rng = row_rng(seed, i);
        for (z, &p) in values.row_mut(i).iter_mut().zip(probs.row(i)) {
            *z = if open_uniform(&mut rng) < p { 1.0 } else { 0.0 };
        }
    }
    GateSample {
        values,
        kind: GateKind::Hard,
        seed,
    }
}

/// `KL(Bernoulli(p) || Bernoulli(alpha))` for one gate.
#[inline]
pub fn kl_term(p: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p);
    p * (p / alpha).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - alpha)).ln()
}

/// Derivative of [`kl_term`] with respect to `p`.
#[inline]
pub(crate) fn kl_term_grad(p: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p);
    (p / alpha).ln() - ((1.0 - p) / (1.0 - alpha)).ln()
}

/// Per-example KL between the gate posterior and the Bernoulli(alpha) prior,
/// summed over concepts.
pub fn kl_bernoulli(probs: &Matrix, alpha: f64) -> Vec<f64> {
    probs
        .iter_rows()
        .map(|row| row.iter().map(|&p| kl_term(p, alpha)).sum())
        .collect()
}

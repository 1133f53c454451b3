//! Analytic gradients of the training objective and a finite-difference
//! check against them.
//!
//! The objective per batch of `N` examples is
//!
//! ```text
//! loss = (1/N) Σ_i CE(softmax(y_i), label_i) + β (1/N) Σ_i KL_i
//! y_i  = (ẑ_i ⊙ s_i) · W_cᵀ
//! ẑ_i  = sigmoid((loc(π_i) + L_i) / τ),   π_i = sigmoid(x_i · W_s)
//! ```
//!
//! With gates off, `y_i = s_i · W_cᵀ` and the KL term vanishes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{CdmError, Result};
use crate::linalg::Matrix;
use crate::model::{cosine_similarity, sigmoid, CdmModel, Hyperparams, SimilarityMatrix, PROB_EPS};
use crate::store::{ConceptSet, EmbeddingMatrix, LabeledDataset};
use crate::variational::{kl_term, kl_term_grad, sample_logistic, LogisticNoise, Relaxation};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPack {
    pub grad_w_c: Matrix,
    pub grad_w_s: Matrix,
    pub loss_value: f64,
    pub ce_value: f64,
    pub kl_value: f64,
}

/// How gates enter the forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GateMode<'a> {
    /// Plain linear classifier.
    Off,
    /// One relaxed sample per example driven by `noise` (N×M).
    Relaxed {
        noise: &'a LogisticNoise,
        relaxation: Relaxation,
    },
}

pub fn loss_and_gradients(
    batch: &LabeledDataset,
    concepts: &ConceptSet,
    model: &CdmModel,
    mode: GateMode<'_>,
) -> Result<GradientPack> {
    let sims = cosine_similarity(batch.embeddings(), concepts.embeddings())?;
    loss_and_gradients_with(batch.embeddings().matrix(), &sims, batch.labels(), model, mode)
}

/// Same as [`loss_and_gradients`] with similarities already computed.
pub fn loss_and_gradients_with(
    images: &Matrix,
    sims: &SimilarityMatrix,
    labels: &[usize],
    model: &CdmModel,
    mode: GateMode<'_>,
) -> Result<GradientPack> {
    let n = labels.len();
    let (c_count, m_count, k_count) = (model.num_classes(), model.num_concepts(), model.embed_dim());
    if n == 0 {
        return Err(CdmError::ShapeError("empty batch".into()));
    }
    if images.shape() != (n, k_count) {
        return Err(CdmError::ShapeError(format!(
            "images are {}x{}, expected {n}x{k_count}",
            images.rows(),
            images.cols()
        )));
    }
    if sims.values().shape() != (n, m_count) {
        return Err(CdmError::ShapeError(format!(
            "similarities are {}x{}, expected {n}x{m_count}",
            sims.rows(),
            sims.cols()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c_count) {
        return Err(CdmError::ShapeError(format!(
            "label {bad} out of range for {c_count} classes"
        )));
    }
    if let GateMode::Relaxed { noise, .. } = mode {
        if noise.values().shape() != (n, m_count) {
            return Err(CdmError::ShapeError(format!(
                "noise is {}x{}, expected {n}x{m_count}",
                noise.values().rows(),
                noise.values().cols()
            )));
        }
        if model.tau.is_nan() || model.tau <= 0.0 {
            return Err(CdmError::TemperatureError(model.tau));
        }
    }

    let inv_n = 1.0 / n as f64;
    let bound = crate::model::logit_bound();
    let mut grad_w_c = Matrix::zeros(c_count, m_count);
    let mut grad_w_s = Matrix::zeros(k_count, m_count);
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;

    let mut effective = vec![0.0; m_count];
    let mut dz_da = vec![0.0; m_count];
    let mut dkl_da = vec![0.0; m_count];
    let mut logits = vec![0.0; c_count];
    let mut g = vec![0.0; c_count];

    for i in 0..n {
        let x = images.row(i);
        let s = sims.values().row(i);

        match mode {
            GateMode::Off => effective.copy_from_slice(s),
            GateMode::Relaxed { noise, relaxation } => {
                let l = noise.values().row(i);
                let mut kl_i = 0.0;
                for m in 0..m_count {
                    let mut a = 0.0;
                    for (k, &xk) in x.iter().enumerate() {
                        a += xk * model.w_s.get(k, m);
                    }
                    let p_raw = sigmoid(a);
                    let p_clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p_raw) || a.abs() >= bound;
                    let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    let dp_da = if p_clamped { 0.0 } else { p * (1.0 - p) };
                    let dloc_da = match (p_clamped, relaxation) {
                        (true, _) => 0.0,
                        (false, Relaxation::Standard) => 1.0,
                        (false, Relaxation::LogProb) => 1.0 - p,
                    };
                    let z_raw = sigmoid((relaxation.location(p) + l[m]) / model.tau);
                    let z = z_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    dz_da[m] = if z != z_raw {
                        0.0
                    } else {
                        z * (1.0 - z) / model.tau * dloc_da
                    };
                    dkl_da[m] = kl_term_grad(p, model.alpha) * dp_da;
                    kl_i += kl_term(p, model.alpha);
                    effective[m] = z * s[m];
                }
                kl_sum += kl_i;
            }
        }

        for (c, y) in logits.iter_mut().enumerate() {
            let w = model.w_c.row(c);
            let mut acc = 0.0;
            for m in 0..m_count {
                acc += effective[m] * w[m];
            }
            *y = acc;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|y| (y - max).exp()).sum();
        let lse = max + sum_exp.ln();
        ce_sum += lse - logits[labels[i]];
        for c in 0..c_count {
            let target = if c == labels[i] { 1.0 } else { 0.0 };
            g[c] = ((logits[c] - lse).exp() - target) * inv_n;
        }

        for (c, &gc) in g.iter().enumerate() {
            for (w, &e) in grad_w_c.row_mut(c).iter_mut().zip(effective.iter()) {
                *w += gc * e;
            }
        }

        if let GateMode::Relaxed { .. } = mode {
            for m in 0..m_count {
                let mut back = 0.0;
                for (c, &gc) in g.iter().enumerate() {
                    back += gc * model.w_c.get(c, m);
                }
                let da = s[m] * back * dz_da[m] + model.beta * inv_n * dkl_da[m];
                if da != 0.0 {
                    for (k, &xk) in x.iter().enumerate() {
                        let cur = grad_w_s.get(k, m);
                        grad_w_s.set(k, m, cur + xk * da);
                    }
                }
            }
        }
    }

    let ce_value = ce_sum * inv_n;
    let kl_value = kl_sum * inv_n;
    let loss_value = ce_value + model.beta * kl_value;
    if !loss_value.is_finite() || !grad_w_c.is_finite() || !grad_w_s.is_finite() {
        return Err(CdmError::NonFinite("loss or gradients".into()));
    }
    Ok(GradientPack {
        grad_w_c,
        grad_w_s,
        loss_value,
        ce_value,
        kl_value,
    })
}

/// Relative discrepancy used by the gradient check. Magnitudes below 1e-3
/// are compared absolutely, so a relative bound of 1e-4 becomes an absolute
/// bound of 1e-7 near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Perturbs every weight by `±h` with the noise held fixed and returns the
/// largest [`relative_error`] between central differences and the analytic
/// gradient.
pub fn finite_difference_check(
    model: &CdmModel,
    batch: &LabeledDataset,
    concepts: &ConceptSet,
    mode: GateMode<'_>,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(CdmError::ConfigError(format!("step must be > 0, got {h}")));
    }
    let sims = cosine_similarity(batch.embeddings(), concepts.embeddings())?;
    let images = batch.embeddings().matrix();
    let labels = batch.labels();
    let analytic = loss_and_gradients_with(images, &sims, labels, model, mode)?;
    let loss_at = |m: &CdmModel| -> Result<f64> {
        Ok(loss_and_gradients_with(images, &sims, labels, m, mode)?.loss_value)
    };

    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for idx in 0..model.w_c.as_slice().len() {
        let orig = model.w_c.as_slice()[idx];
        probe.w_c.as_mut_slice()[idx] = orig + h;
        let up = loss_at(&probe)?;
        probe.w_c.as_mut_slice()[idx] = orig - h;
        let down = loss_at(&probe)?;
        probe.w_c.as_mut_slice()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.grad_w_c.as_slice()[idx], numeric));
    }
    for idx in 0..model.w_s.as_slice().len() {
        let orig = model.w_s.as_slice()[idx];
        probe.w_s.as_mut_slice()[idx] = orig + h;
        let up = loss_at(&probe)?;
        probe.w_s.as_mut_slice()[idx] = orig - h;
        let down = loss_at(&probe)?;
        probe.w_s.as_mut_slice()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.grad_w_s.as_slice()[idx], numeric));
    }
    Ok(worst)
}

/// A seeded random problem for gradient checking.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub batch: LabeledDataset,
    pub concepts: ConceptSet,
    pub model: CdmModel,
    pub noise: LogisticNoise,
}

impl GradcheckInstance {
    /// Random unit embeddings, uniform labels, standard-normal weights and
    /// logistic noise, all derived from `seed`.
    pub fn random(
        n: usize,
        k: usize,
        m: usize,
        c: usize,
        seed: u64,
        hp: Hyperparams,
    ) -> Result<Self> {
        if n == 0 || k == 0 || m == 0 || c == 0 {
            return Err(CdmError::ConfigError("instance dimensions must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows, cols| {
            Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
        };
        let images = EmbeddingMatrix::with_prefix(normal(n, k), "img")?;
        let concepts = ConceptSet::from_embeddings(EmbeddingMatrix::with_prefix(normal(m, k), "concept")?);
        let w_c = normal(c, m);
        let w_s = normal(k, m);
        let class_pick = Uniform::new(0, c).map_err(|e| CdmError::ConfigError(e.to_string()))?;
        let labels = (0..n).map(|_| class_pick.sample(&mut rng)).collect();
        let class_names = (0..c).map(|i| format!("class{i}")).collect();
        let batch = LabeledDataset::new(images, labels, class_names)?;
        let model = CdmModel::new(w_c, w_s, hp, true)?;
        let noise = sample_logistic(n, m, seed);
        Ok(GradcheckInstance {
            batch,
            concepts,
            model,
            noise,
        })
    }

    pub fn check(&self, relaxation: Relaxation, h: f64) -> Result<f64> {
        finite_difference_check(
            &self.model,
            &self.batch,
            &self.concepts,
            GateMode::Relaxed {
                noise: &self.noise,
                relaxation,
            },
            h,
        )
    }
}

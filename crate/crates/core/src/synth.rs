//! Planted-concept synthetic data.
//!
//! Each class owns a disjoint block of concepts. An image of class `c` is
//! the normalized mean of its class's concept embeddings plus isotropic
//! Gaussian noise, so the "right" gate pattern is known in advance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{CdmError, Result};
use crate::linalg::Matrix;
use crate::store::{ConceptSet, EmbeddingMatrix, LabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub concepts_per_class: usize,
    /// Total number of images, split as evenly as possible across classes.
    pub n: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            concepts_per_class: 5,
            n: 800,
            dim: 32,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Index of the class that owns concept `m`.
    pub fn owner(&self, m: usize) -> usize {
        m / self.concepts_per_class
    }
}

pub fn generate(spec: &SynthSpec) -> Result<(LabeledDataset, ConceptSet)> {
    if spec.classes == 0 || spec.concepts_per_class == 0 || spec.n == 0 || spec.dim == 0 {
        return Err(CdmError::ConfigError(
            "classes, concepts-per-class, n and k must all be > 0".into(),
        ));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(CdmError::ConfigError("noise sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.classes * spec.concepts_per_class;

    let concept_rows = Matrix::from_fn(m, spec.dim, |_, _| StandardNormal.sample(&mut rng));
    let names = (0..m)
        .map(|j| format!("class{}_concept{}", spec.owner(j), j % spec.concepts_per_class))
        .collect();
    let concepts = ConceptSet::new(concept_rows, names)?;

    let centers = Matrix::from_fn(spec.classes, spec.dim, |c, k| {
        let block = c * spec.concepts_per_class..(c + 1) * spec.concepts_per_class;
        block.map(|j| concepts.embeddings().row(j)[k]).sum::<f64>() / spec.concepts_per_class as f64
    });

    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| CdmError::ConfigError(e.to_string()))?;
    let images = Matrix::from_fn(spec.n, spec.dim, |i, k| {
        centers.get(labels[i], k) + noise.sample(&mut rng)
    });
    let images = EmbeddingMatrix::with_prefix(images, "img")?;
    let class_names = (0..spec.classes).map(|c| format!("class{c}")).collect();
    Ok((LabeledDataset::new(images, labels, class_names)?, concepts))
}

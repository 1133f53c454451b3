//! Concept discovery models.
//!
//! A sparse, interpretable classifier over frozen image and concept
//! embeddings. Each image is represented by its cosine similarities to a set
//! of text concepts; a per-example Bernoulli gate, amortized through a
//! learned map from the image embedding, decides which concepts take part in
//! a single linear decision layer. Gates are trained with a binary Concrete
//! relaxation and a KL penalty toward a sparse Bernoulli prior, and sampled
//! hard at inference.

pub mod error;
pub mod linalg;
pub mod store;
pub mod model;
pub mod variational;
pub mod grad;

pub use error::{CdmError, Result};
pub use linalg::Matrix;
pub mod optim;
pub mod explain;
pub mod train;
pub mod synth;
pub mod cli;

//! CDME container: the on-disk format for embeddings, labelled datasets,
//! concept sets and weight matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CDME0001"            8 bytes, ASCII magic
//! header_len            u32
//! header                header_len bytes of UTF-8 JSON
//!                       {"kind", "rows", "dim", "extras": {ids|labels|class_names|names}}
//! payload               rows * dim IEEE-754 f32, row-major
//! ```
//!
//! Embedding kinds (`matrix`, `dataset`, `concepts`) are validated to unit
//! row norm on load. The `weights` kind carries model parameters and is only
//! checked for shape and finiteness.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};
use crate::linalg::{norm, Matrix};

pub const MAGIC: &[u8; 8] = b"CDME0001";

/// Rows whose norm deviates from 1 by more than this are renormalized on load.
pub const NORM_TOLERANCE: f64 = 1e-4;
/// Rows with a norm below this cannot be normalized.
pub const MIN_NORM: f64 = 1e-6;
const LARGE_DEVIATION: f64 = 1e-1;

/// Unit-norm embedding rows with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub(crate) data: Matrix,
    pub(crate) ids: Vec<String>,
    pub(crate) original_norms: Vec<f64>,
    pub(crate) renormalized: bool,
}

impl EmbeddingMatrix {
    /// Validates `data` and normalizes any row whose norm is off by more
    /// than [`NORM_TOLERANCE`].
    pub fn new(data: Matrix, ids: Vec<String>) -> Result<Self> {
        if data.cols() == 0 {
            return Err(CdmError::DimMismatch("embedding dim must be > 0".into()));
        }
        if ids.len() != data.rows() {
            return Err(CdmError::DimMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                data.rows()
            )));
        }
        if !data.is_finite() {
            return Err(CdmError::NonFinite("embedding payload".into()));
        }
        let mut data = data;
        let mut original_norms = Vec::with_capacity(data.rows());
        let mut renormalized = false;
        let mut far_off = 0usize;
        for i in 0..data.rows() {
            let n = norm(data.row(i));
            if n < MIN_NORM {
                return Err(CdmError::NormError { row: i, norm: n });
            }
            if (n - 1.0).abs() > NORM_TOLERANCE {
                if (n - 1.0).abs() >= LARGE_DEVIATION {
                    far_off += 1;
                }
                data.row_mut(i).iter_mut().for_each(|v| *v /= n);
                renormalized = true;
            }
            original_norms.push(n);
        }
        if far_off > 0 {
            log::info!("normalized {far_off} of {} rows whose norm was off by 0.1 or more", data.rows());
        }
        Ok(EmbeddingMatrix {
            data,
            ids,
            original_norms,
            renormalized,
        })
    }

    /// Like [`EmbeddingMatrix::new`] with ids `"{prefix}{i}"`.
    pub fn with_prefix(data: Matrix, prefix: &str) -> Result<Self> {
        let ids = (0..data.rows()).map(|i| format!("{prefix}{i}")).collect();
        Self::new(data, ids)
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row norms as they were before any normalization.
    pub fn original_norms(&self) -> &[f64] {
        &self.original_norms
    }

    /// Whether any row had to be rescaled.
    pub fn was_renormalized(&self) -> bool {
        self.renormalized
    }

    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            data: self.data.gather_rows(indices),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            original_norms: indices.iter().map(|&i| self.original_norms[i]).collect(),
            renormalized: self.renormalized,
        }
    }
}

/// Image embeddings with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub(crate) embeddings: EmbeddingMatrix,
    pub(crate) labels: Vec<usize>,
    pub(crate) class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        embeddings: EmbeddingMatrix,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(CdmError::DimMismatch(format!(
                "{} labels for {} embeddings",
                labels.len(),
                embeddings.rows()
            )));
        }
        if class_names.is_empty() {
            return Err(CdmError::DimMismatch("dataset has no classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(CdmError::DimMismatch(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(LabeledDataset {
            embeddings,
            labels,
            class_names,
        })
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples per class, indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            embeddings: self.embeddings.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Concept text embeddings with their names.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSet {
    pub(crate) embeddings: EmbeddingMatrix,
}

impl ConceptSet {
    pub fn new(data: Matrix, names: Vec<String>) -> Result<Self> {
        Ok(ConceptSet {
            embeddings: EmbeddingMatrix::new(data, names)?,
        })
    }

    pub fn from_embeddings(embeddings: EmbeddingMatrix) -> Self {
        ConceptSet { embeddings }
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn names(&self) -> &[String] {
        &self.embeddings.ids
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named parameter matrix; rows are not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub(crate) data: Matrix,
    pub(crate) ids: Vec<String>,
}

impl WeightMatrix {
    pub fn new(data: Matrix, ids: Vec<String>) -> Result<Self> {
        if ids.len() != data.rows() {
            return Err(CdmError::DimMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                data.rows()
            )));
        }
        if data.cols() == 0 {
            return Err(CdmError::DimMismatch("weight dim must be > 0".into()));
        }
        if !data.is_finite() {
            return Err(CdmError::NonFinite("weight payload".into()));
        }
        Ok(WeightMatrix { data, ids })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Any object a CDME file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Matrix(EmbeddingMatrix),
    Dataset(LabeledDataset),
    Concepts(ConceptSet),
    Weights(WeightMatrix),
}

impl Container {
    pub fn kind(&self) -> Kind {
        match self {
            Container::Matrix(_) => Kind::Matrix,
            Container::Dataset(_) => Kind::Dataset,
            Container::Concepts(_) => Kind::Concepts,
            Container::Weights(_) => Kind::Weights,
        }
    }

    pub fn into_dataset(self) -> Result<LabeledDataset> {
        match self {
            Container::Dataset(d) => Ok(d),
            other => Err(wrong_kind(Kind::Dataset, other.kind())),
        }
    }

    pub fn into_concepts(self) -> Result<ConceptSet> {
        match self {
            Container::Concepts(c) => Ok(c),
            other => Err(wrong_kind(Kind::Concepts, other.kind())),
        }
    }

    pub fn into_weights(self) -> Result<WeightMatrix> {
        match self {
            Container::Weights(w) => Ok(w),
            other => Err(wrong_kind(Kind::Weights, other.kind())),
        }
    }

    /// The embedding rows of a `matrix`, `dataset` or `concepts` container.
    pub fn into_embeddings(self) -> Result<EmbeddingMatrix> {
        match self {
            Container::Matrix(m) => Ok(m),
            Container::Dataset(d) => Ok(d.embeddings),
            Container::Concepts(c) => Ok(c.embeddings),
            Container::Weights(_) => Err(wrong_kind(Kind::Matrix, Kind::Weights)),
        }
    }
}

fn wrong_kind(expected: Kind, found: Kind) -> CdmError {
    CdmError::Header(format!(
        "expected a {expected:?} container, found {found:?}"
    ))
}

/// Borrowed view used by [`save_container`].
#[derive(Debug, Clone, Copy)]
pub enum ContainerRef<'a> {
    Matrix(&'a EmbeddingMatrix),
    Dataset(&'a LabeledDataset),
    Concepts(&'a ConceptSet),
    Weights(&'a WeightMatrix),
}

impl<'a> From<&'a EmbeddingMatrix> for ContainerRef<'a> {
    fn from(v: &'a EmbeddingMatrix) -> Self {
        ContainerRef::Matrix(v)
    }
}

impl<'a> From<&'a LabeledDataset> for ContainerRef<'a> {
    fn from(v: &'a LabeledDataset) -> Self {
        ContainerRef::Dataset(v)
    }
}

impl<'a> From<&'a ConceptSet> for ContainerRef<'a> {
    fn from(v: &'a ConceptSet) -> Self {
        ContainerRef::Concepts(v)
    }
}

impl<'a> From<&'a WeightMatrix> for ContainerRef<'a> {
    fn from(v: &'a WeightMatrix) -> Self {
        ContainerRef::Weights(v)
    }
}

impl<'a> From<&'a Container> for ContainerRef<'a> {
    fn from(v: &'a Container) -> Self {
        match v {
            Container::Matrix(m) => ContainerRef::Matrix(m),
            Container::Dataset(d) => ContainerRef::Dataset(d),
            Container::Concepts(c) => ContainerRef::Concepts(c),
            Container::Weights(w) => ContainerRef::Weights(w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Matrix,
    Dataset,
    Concepts,
    Weights,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    rows: u64,
    dim: u64,
    #[serde(default)]
    extras: Extras,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Extras {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CdmError::io(path, e))?;
    decode(&bytes)
}

/// Parses a container from memory. Never panics, whatever the input.
pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CdmError::MagicMismatch);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(CdmError::Header("truncated header length".into()));
    }
    let header_len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
    let rest = &rest[4..];
    if header_len > rest.len() {
        return Err(CdmError::Header(format!(
            "header length {header_len} exceeds file size"
        )));
    }
    let (header_bytes, payload) = rest.split_at(header_len);
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| CdmError::Header(e.to_string()))?;

    let rows = usize::try_from(header.rows)
        .map_err(|_| CdmError::DimMismatch("row count overflows".into()))?;
    let dim = usize::try_from(header.dim)
        .map_err(|_| CdmError::DimMismatch("dim overflows".into()))?;
    if dim == 0 {
        return Err(CdmError::DimMismatch("dim must be > 0".into()));
    }
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CdmError::DimMismatch("rows x dim overflows".into()))?;
    if payload.len() != expected {
        return Err(CdmError::DimMismatch(format!(
            "header declares {rows}x{dim} ({expected} bytes), payload has {} bytes",
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(rows * dim);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(CdmError::NonFinite("container payload".into()));
        }
        values.push(f64::from(v));
    }
    let data = Matrix::from_vec(rows, dim, values)?;
    let extras = header.extras;

    let ids_or_default = |ids: Option<Vec<String>>, prefix: &str| -> Vec<String> {
        ids.unwrap_or_else(|| (0..rows).map(|i| format!("{prefix}{i}")).collect())
    };

    match header.kind {
        Kind::Matrix => Ok(Container::Matrix(EmbeddingMatrix::new(
            data,
            ids_or_default(extras.ids, "row"),
        )?)),
        Kind::Weights => Ok(Container::Weights(WeightMatrix::new(
            data,
            ids_or_default(extras.ids, "row"),
        )?)),
        Kind::Concepts => {
            let names = extras
                .names
                .ok_or_else(|| CdmError::Header("concepts container without names".into()))?;
            Ok(Container::Concepts(ConceptSet::new(data, names)?))
        }
        Kind::Dataset => {
            let labels = extras
                .labels
                .ok_or_else(|| CdmError::Header("dataset container without labels".into()))?;
            let class_names = extras.class_names.ok_or_else(|| {
                CdmError::Header("dataset container without class_names".into())
            })?;
            let labels = labels
                .into_iter()
                .map(|l| usize::try_from(l).unwrap_or(usize::MAX))
                .collect();
            let embeddings = EmbeddingMatrix::new(data, ids_or_default(extras.ids, "img"))?;
            Ok(Container::Dataset(LabeledDataset::new(
                embeddings,
                labels,
                class_names,
            )?))
        }
    }
}

/// Serializes a container. Fails before producing any bytes if the payload
/// is not finite.
pub fn encode<'a>(object: impl Into<ContainerRef<'a>>) -> Result<Vec<u8>> {
    let (kind, data, extras) = match object.into() {
        ContainerRef::Matrix(m) => (
            Kind::Matrix,
            &m.data,
            Extras {
                ids: Some(m.ids.clone()),
                ..Extras::default()
            },
        ),
        ContainerRef::Dataset(d) => (
            Kind::Dataset,
            &d.embeddings.data,
            Extras {
                ids: Some(d.embeddings.ids.clone()),
                labels: Some(d.labels.iter().map(|&l| l as u64).collect()),
                class_names: Some(d.class_names.clone()),
                ..Extras::default()
            },
        ),
        ContainerRef::Concepts(c) => (
            Kind::Concepts,
            &c.embeddings.data,
            Extras {
                names: Some(c.embeddings.ids.clone()),
                ..Extras::default()
            },
        ),
        ContainerRef::Weights(w) => (
            Kind::Weights,
            &w.data,
            Extras {
                ids: Some(w.ids.clone()),
                ..Extras::default()
            },
        ),
    };
    if !data.is_finite() {
        return Err(CdmError::NonFinite(format!("{kind:?} payload")));
    }
    let narrowed: Vec<f32> = data.as_slice().iter().map(|&v| v as f32).collect();
    if narrowed.iter().any(|v| !v.is_finite()) {
        return Err(CdmError::NonFinite(format!("{kind:?} payload (f32 overflow)")));
    }
    let header = Header {
        kind,
        rows: data.rows() as u64,
        dim: data.cols() as u64,
        extras,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CdmError::Header(e.to_string()))?;
    let header_len = u32::try_from(header_json.len())
        .map_err(|_| CdmError::Header("header larger than 4 GiB".into()))?;

    let mut out = Vec::with_capacity(12 + header_json.len() + narrowed.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in narrowed {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_container<'a>(object: impl Into<ContainerRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(object)?;
    fs::write(path, bytes).map_err(|e| CdmError::io(path, e))
}

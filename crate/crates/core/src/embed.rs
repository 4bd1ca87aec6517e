//! Embedding types and the dense / late-interaction similarity kernels.
//!
//! Vectors are stored as `f32`. Every reduction (norms, dot products, the
//! MaxSim sum) accumulates in `f64`.
//!
//! Late interaction scores a query token sequence `q` against a document token
//! sequence `p` as
//!
//! ```text
//! s_late(q, p) = Σ_i max_j cos(q_i, p_j)
//! ```
//!
//! and the training-side variant divides by the number of query tokens.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Score grid of queries (rows) against passages (columns).
pub type SimilarityMatrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Passage,
}

impl Role {
    pub fn to_byte(self) -> u8 {
        match self {
            Role::Query => 0,
            Role::Passage => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::Query),
            1 => Some(Role::Passage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Text),
            1 => Some(Modality::Image),
            _ => None,
        }
    }
}

/// Which similarity an operation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Cosine of the pooled single vectors.
    Dense,
    /// Late interaction over token rows.
    Late,
}

fn check_finite(values: &[f32], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn norm_f32(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// A single pooled embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    values: Vec<f32>,
}

impl DenseVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("dense vector must have dimension >= 1"));
        }
        check_finite(&values, "dense vector")?;
        Ok(Self { values })
    }

    /// Converts from `f64`, rounding to storage precision.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        norm_f32(&self.values)
    }

    pub fn normalize(&self) -> Result<DenseVector> {
        normalize(self)
    }

    pub fn truncate(&self, k: usize) -> Result<DenseVector> {
        truncate(self, k)
    }
}

/// Returns `v / ||v||`.
pub fn normalize(v: &DenseVector) -> Result<DenseVector> {
    let values = normalize_slice(&v.values).ok_or(Error::Degenerate("embedding"))?;
    Ok(DenseVector { values })
}

fn normalize_slice(v: &[f32]) -> Option<Vec<f32>> {
    let norm = norm_f32(v);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Keeps the first `k` components and renormalizes them.
pub fn truncate(v: &DenseVector, k: usize) -> Result<DenseVector> {
    if k == 0 || k > v.dim() {
        return Err(Error::invalid(format!(
            "truncation length {k} outside 1..={}",
            v.dim()
        )));
    }
    if k == v.dim() {
        return Ok(v.clone());
    }
    let values = normalize_slice(&v.values[..k]).ok_or(Error::Degenerate("truncation"))?;
    Ok(DenseVector { values })
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    cosine_prefix(a.as_slice(), b.as_slice()).ok_or(Error::Degenerate("embedding"))
}

/// Cosine over equal-length slices; `None` when either side is zero.
pub(crate) fn cosine_prefix(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = norm_f32(a);
    let nb = norm_f32(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot_f32(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// A token sequence of embeddings, `t x d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVector {
    dim: usize,
    data: Vec<f32>,
    inv_norms: Vec<f64>,
}

impl MultiVector {
    /// Builds from row-major data. Rows are kept as given; every row must be
    /// nonzero so its cosine is defined.
    pub fn new(data: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("multi-vector dimension must be >= 1"));
        }
        if data.is_empty() {
            return Err(Error::invalid("multi-vector needs at least one token row"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "multi-vector data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        check_finite(&data, "multi-vector")?;
        let inv_norms = data
            .chunks_exact(dim)
            .map(|row| {
                let n = norm_f32(row);
                if n == 0.0 {
                    Err(Error::Degenerate("embedding"))
                } else {
                    Ok(1.0 / n)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            data,
            inv_norms,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::invalid("multi-vector needs at least one token row"))?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, dim)
    }

    /// Token count `t`.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn inv_norm(&self, i: usize) -> f64 {
        self.inv_norms[i]
    }

    /// Returns a copy with every row scaled to unit length.
    pub fn normalize_rows(&self) -> MultiVector {
        let data: Vec<f32> = self
            .data
            .chunks_exact(self.dim)
            .zip(&self.inv_norms)
            .flat_map(|(row, &inv)| row.iter().map(move |&x| (x as f64 * inv) as f32))
            .collect();
        // Rows were nonzero, so the rescaled rows are too.
        MultiVector::new(data, self.dim).expect("normalized rows stay valid")
    }
}

/// Row-wise mean followed by normalization.
pub fn mean_pool(m: &MultiVector) -> Result<DenseVector> {
    let t = m.len() as f64;
    let mut acc = vec![0.0f64; m.dim()];
    for row in m.rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x as f64;
        }
    }
    let norm = acc.iter().map(|a| (a / t) * (a / t)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("embedding"));
    }
    let values = acc.iter().map(|a| (a / t / norm) as f32).collect();
    Ok(DenseVector { values })
}

const DOC_BLOCK: usize = 32;

/// Query side of MaxSim, converted once to `f64` unit rows so that many
/// documents can be scored against it.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    dim: usize,
    rows: Vec<f64>,
}

impl PreparedQuery {
    pub fn new(q: &MultiVector) -> Self {
        let mut rows = Vec::with_capacity(q.data.len());
        for (i, row) in q.rows().enumerate() {
            let inv = q.inv_norm(i);
            rows.extend(row.iter().map(|&x| x as f64 * inv));
        }
        Self { dim: q.dim, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unnormalized late-interaction score against `doc`.
    pub fn maxsim(&self, doc: &MultiVector) -> Result<f64> {
        if doc.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: doc.dim,
            });
        }
        Ok(self.maxsim_unchecked(doc))
    }

    fn maxsim_unchecked(&self, doc: &MultiVector) -> f64 {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just detected.
            return unsafe { self.maxsim_avx2(doc) };
        }
        self.maxsim_blocked(doc)
    }

    /// Same loop compiled with wider vectors. No FMA, so every product and
    /// sum rounds exactly as in the portable build.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn maxsim_avx2(&self, doc: &MultiVector) -> f64 {
        self.maxsim_blocked(doc)
    }

    #[inline(always)]
    fn maxsim_blocked(&self, doc: &MultiVector) -> f64 {
        let d = self.dim;
        let t = self.len();
        let mut best = vec![f64::NEG_INFINITY; t];
        let n_doc = doc.len();
        // Document rows of the current block, unit-scaled and widened once.
        let mut block = vec![0.0f64; DOC_BLOCK.min(n_doc) * d];

        let mut start = 0;
        while start < n_doc {
            let end = (start + DOC_BLOCK).min(n_doc);
            let rows = end - start;
            for (r, dst) in block[..rows * d].chunks_exact_mut(d).enumerate() {
                let j = start + r;
                let inv = doc.inv_norms[j];
                for (o, &x) in dst.iter_mut().zip(doc.row(j)) {
                    *o = x as f64 * inv;
                }
            }
            for (q, b) in self.rows.chunks_exact(d).zip(best.iter_mut()) {
                let mut m = *b;
                for p in block[..rows * d].chunks_exact(d) {
                    let v = dot_f64(q, p);
                    if v > m {
                        m = v;
                    }
                }
                *b = m;
            }
            start = end;
        }
        best.iter().sum()
    }
}

/// Eight independent partial sums; lanes combine pairwise at the end.
#[inline(always)]
fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (x, y) in (&mut ac).zip(&mut bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Sum over query tokens of the best cosine against any document token.
/// Not symmetric: `q` is the query side.
pub fn late_interaction_score(q: &MultiVector, p: &MultiVector) -> Result<f64> {
    PreparedQuery::new(q).maxsim(p)
}

/// Late interaction divided by the query token count; lies in `[-1, 1]`.
pub fn normalized_late_score(q: &MultiVector, p: &MultiVector) -> Result<f64> {
    Ok(late_interaction_score(q, p)? / q.len() as f64)
}

/// Strictly decreasing list of Matryoshka truncation lengths, starting at
/// the full dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruncationSchedule {
    dims: Vec<usize>,
}

impl TruncationSchedule {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("truncation schedule is empty"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("truncation lengths must be >= 1"));
        }
        if dims.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!(
                "truncation lengths must be strictly decreasing, got {dims:?}"
            )));
        }
        Ok(Self { dims })
    }

    /// `[d, d/2, d/4, ...]` down to (and including) the first value `<= min`.
    pub fn halving(full: usize, min: usize) -> Result<Self> {
        let mut dims = vec![full];
        let mut d = full;
        while d / 2 >= min.max(1) && d > min {
            d /= 2;
            dims.push(d);
        }
        Self::new(dims)
    }

    pub fn full_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Checks the schedule against a vector dimension.
    pub fn validate_for(&self, dim: usize) -> Result<()> {
        if self.dims[0] > dim {
            return Err(Error::invalid(format!(
                "truncation length {} exceeds vector dimension {dim}",
                self.dims[0]
            )));
        }
        if self.dims[0] != dim {
            return Err(Error::invalid(format!(
                "truncation schedule must start at the full dimension {dim}, starts at {}",
                self.dims[0]
            )));
        }
        Ok(())
    }
}

/// One stored query or passage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub role: Role,
    pub modality: Modality,
    pub dense: DenseVector,
    pub multi: Option<MultiVector>,
}

impl EmbeddingRecord {
    pub fn multi_or_err(&self) -> Result<&MultiVector> {
        self.multi
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record `{}` has no multi-vector", self.id)))
    }
}

/// Builds the query x passage score grid. Late mode uses the query-length
/// normalized score. Rows are computed in parallel; each entry is reduced
/// in a fixed order, so the result does not depend on the thread count.
pub fn similarity_matrix(
    queries: &[EmbeddingRecord],
    passages: &[EmbeddingRecord],
    mode: ScoreMode,
) -> Result<SimilarityMatrix> {
    if queries.is_empty() || passages.is_empty() {
        return Err(Error::invalid("similarity matrix needs nonempty inputs"));
    }
    let cols = passages.len();
    let rows: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| -> Result<Vec<f64>> {
            match mode {
                ScoreMode::Dense => passages
                    .iter()
                    .map(|p| cosine(&q.dense, &p.dense))
                    .collect(),
                ScoreMode::Late => {
                    let qm = q.multi_or_err()?;
                    let prepared = PreparedQuery::new(qm);
                    let t = qm.len() as f64;
                    passages
                        .iter()
                        .map(|p| Ok(prepared.maxsim(p.multi_or_err()?)? / t))
                        .collect()
                }
            }
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((queries.len(), cols), flat).expect("shape matches"))
}

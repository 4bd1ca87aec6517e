//! Toy encoder: a frozen linear backbone over token features, followed by
//! a trainable head that produces a dense and a multi-vector output.
//!
//! For a token matrix `X` (t x f), role offset `r` (f), backbone `W`
//! (f x h), dense scale `s` (h) and projection `P` (h x d_mv):
//!
//! ```text
//! H = (X + 1 r^T) W
//! dense = s ⊙ mean_rows(H)
//! multi = H P
//! ```
//!
//! Both outputs are normalized when turned into records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::SyntheticItem;
use crate::embed::{DenseVector, EmbeddingRecord, Modality, MultiVector, Role};
use crate::error::{Error, Result};
use crate::losses::TrainEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Retrieval,
    TextMatching,
    Code,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Retrieval, Task::TextMatching, Task::Code];

    pub fn name(self) -> &'static str {
        match self {
            Task::Retrieval => "retrieval",
            Task::TextMatching => "text-matching",
            Task::Code => "code",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask {
                name: s.to_string(),
                valid: Task::ALL.map(Task::name).join(", "),
            })
    }
}

/// Shared backbone for both modalities, or one per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Shared,
    TwoTower,
}

/// Trainable part: role offsets, dense scale and multi-vector projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub query_offset: Array1<f64>,
    pub passage_offset: Array1<f64>,
    pub dense_scale: Array1<f64>,
    pub multi_proj: Array2<f64>,
}

impl Head {
    fn offset(&self, role: Role) -> &Array1<f64> {
        match role {
            Role::Query => &self.query_offset,
            Role::Passage => &self.passage_offset,
        }
    }

    pub fn zeros_like(&self) -> Head {
        Head {
            query_offset: Array1::zeros(self.query_offset.len()),
            passage_offset: Array1::zeros(self.passage_offset.len()),
            dense_scale: Array1::zeros(self.dense_scale.len()),
            multi_proj: Array2::zeros(self.multi_proj.raw_dim()),
        }
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, other: &Head, w: f64) {
        self.query_offset.scaled_add(w, &other.query_offset);
        self.passage_offset.scaled_add(w, &other.passage_offset);
        self.dense_scale.scaled_add(w, &other.dense_scale);
        self.multi_proj.scaled_add(w, &other.multi_proj);
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.query_offset
            .iter()
            .chain(self.passage_offset.iter())
            .chain(self.dense_scale.iter())
            .chain(self.multi_proj.iter())
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        checksum_f64(self.params())
    }
}

fn checksum_f64<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Array2<f64>,
    mean_hidden: Array1<f64>,
    modality: Modality,
    role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    kind: BackboneKind,
    text_backbone: Array2<f64>,
    /// Only for two-tower encoders.
    image_backbone: Option<Array2<f64>>,
    /// The single phase-1 head.
    base: Head,
    /// Per-task copies of `base`, present once duplicated.
    adapters: BTreeMap<Task, Head>,
}

impl ToyEncoder {
    /// Random backbone(s) with entries `N(0, 1/f)`, identity dense head,
    /// zero role offsets, projection entries `N(0, 1/h)`.
    pub fn new(
        kind: BackboneKind,
        feature_dim: usize,
        hidden_dim: usize,
        multi_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 || hidden_dim == 0 || multi_dim == 0 {
            return Err(Error::Config("encoder dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |r: usize, c: usize, var: f64| {
            let n = Normal::new(0.0, var.sqrt()).expect("positive variance");
            Array2::from_shape_fn((r, c), |_| n.sample(&mut rng))
        };
        let text_backbone = gauss(feature_dim, hidden_dim, 1.0 / feature_dim as f64);
        let multi_proj = gauss(hidden_dim, multi_dim, 1.0 / hidden_dim as f64);
        let image_backbone = match kind {
            BackboneKind::Shared => None,
            BackboneKind::TwoTower => {
                Some(gauss(feature_dim, hidden_dim, 1.0 / feature_dim as f64))
            }
        };
        Ok(Self {
            kind,
            text_backbone,
            image_backbone,
            base: Head {
                query_offset: Array1::zeros(feature_dim),
                passage_offset: Array1::zeros(feature_dim),
                dense_scale: Array1::ones(hidden_dim),
                multi_proj,
            },
            adapters: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.text_backbone.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.text_backbone.ncols()
    }

    pub fn multi_dim(&self) -> usize {
        self.base.multi_proj.ncols()
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    pub fn base_head(&self) -> &Head {
        &self.base
    }

    pub(crate) fn base_head_mut(&mut self) -> &mut Head {
        &mut self.base
    }

    /// Copies the phase-1 head into every task adapter.
    pub fn duplicate_adapters(&mut self) {
        self.adapters = Task::ALL.iter().map(|&t| (t, self.base.clone())).collect();
    }

    /// Adapter for `task`; the base head before duplication.
    pub fn head(&self, task: Task) -> &Head {
        self.adapters.get(&task).unwrap_or(&self.base)
    }

    pub(crate) fn adapter_mut(&mut self, task: Task) -> Result<&mut Head> {
        self.adapters
            .get_mut(&task)
            .ok_or_else(|| Error::invalid("encoder has no task adapters; run phase 1 first"))
    }

    fn backbone(&self, modality: Modality) -> &Array2<f64> {
        match (modality, &self.image_backbone) {
            (Modality::Image, Some(w)) => w,
            _ => &self.text_backbone,
        }
    }

    pub fn backbone_checksum(&self) -> String {
        let image = self.image_backbone.iter().flat_map(|w| w.iter());
        checksum_f64(self.text_backbone.iter().chain(image))
    }

    pub fn head_checksum(&self, task: Task) -> String {
        self.head(task).checksum()
    }

    /// Raw (unnormalized) outputs with the cache for [`Self::backward`].
    pub fn forward(
        &self,
        head: &Head,
        item: &SyntheticItem,
        role: Role,
    ) -> Result<(TrainEmbedding, ForwardCache)> {
        if item.tokens.ncols() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                found: item.tokens.ncols(),
            });
        }
        if item.tokens.nrows() == 0 {
            return Err(Error::invalid(format!("item `{}` has no tokens", item.id)));
        }
        let shifted = &item.tokens + &head.offset(role).view().insert_axis(Axis(0));
        let hidden = shifted.dot(self.backbone(item.modality));
        let mean_hidden = hidden.mean_axis(Axis(0)).expect("nonempty");
        let dense = &head.dense_scale * &mean_hidden;
        let multi = hidden.dot(&head.multi_proj);
        Ok((
            TrainEmbedding::new(dense, multi),
            ForwardCache {
                hidden,
                mean_hidden,
                modality: item.modality,
                role,
            },
        ))
    }

    /// Accumulates head gradients from gradients on the raw outputs.
    pub fn backward(
        &self,
        head: &Head,
        cache: &ForwardCache,
        grad: &TrainEmbedding,
        acc: &mut Head,
    ) {
        acc.dense_scale += &(&grad.dense * &cache.mean_hidden);
        acc.multi_proj += &cache.hidden.t().dot(&grad.multi);
        // Summed over token rows, the mean-pool contributes `d_mean` once.
        let d_mean = &grad.dense * &head.dense_scale;
        let d_hidden_sum = grad.multi.dot(&head.multi_proj.t()).sum_axis(Axis(0)) + d_mean;
        let d_offset = self.backbone(cache.modality).dot(&d_hidden_sum);
        match cache.role {
            Role::Query => acc.query_offset += &d_offset,
            Role::Passage => acc.passage_offset += &d_offset,
        }
    }

    /// Normalized record for search and diagnostics.
    pub fn encode(&self, item: &SyntheticItem, task: Task, role: Role) -> Result<EmbeddingRecord> {
        let (raw, _) = self.forward(self.head(task), item, role)?;
        let dense =
            DenseVector::from_f64(raw.dense.as_slice().expect("contiguous"))?.normalize()?;
        let rows: Vec<Vec<f32>> = raw
            .multi
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as f32).collect())
            .collect();
        let multi = MultiVector::from_rows(&rows)?.normalize_rows();
        Ok(EmbeddingRecord {
            id: item.id.clone(),
            role,
            modality: item.modality,
            dense,
            multi: Some(multi),
        })
    }

    /// [`Self::encode`] with the task given by name.
    pub fn encode_named(
        &self,
        item: &SyntheticItem,
        task: &str,
        role: Role,
    ) -> Result<EmbeddingRecord> {
        self.encode(item, task.parse()?, role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::data::{generate_synthetic, DataConfig};

    #[test]
    fn unknown_task_lists_valid_ones() {
        let err = "ranking".parse::<Task>().unwrap_err().to_string();
        assert!(err.contains("retrieval") && err.contains("text-matching") && err.contains("code"));
    }

    #[test]
    fn encode_is_deterministic() {
        let d = generate_synthetic(3, &DataConfig::default()).unwrap();
        let e = ToyEncoder::new(BackboneKind::Shared, 12, 16, 8, 5).unwrap();
        let a = e.encode(&d.items[0], Task::Retrieval, Role::Query).unwrap();
        let b = e.encode(&d.items[0], Task::Retrieval, Role::Query).unwrap();
        assert_eq!(a, b);
        assert!((a.dense.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backward_matches_difference_quotient() {
        let d = generate_synthetic(3, &DataConfig::default()).unwrap();
        let e = ToyEncoder::new(BackboneKind::TwoTower, 12, 16, 8, 5).unwrap();
        let mut head = e.base_head().clone();
        head.query_offset.mapv_inplace(|_| 0.1);
        let item = d
            .items
            .iter()
            .find(|i| i.modality == Modality::Image)
            .unwrap();
        // Linear functional of both outputs.
        let (out, cache) = e.forward(&head, item, Role::Query).unwrap();
        let wd = Array1::from_shape_fn(out.dense.len(), |i| (i as f64 * 0.37).sin());
        let wm = Array2::from_shape_fn(out.multi.raw_dim(), |(i, j)| {
            ((i * 7 + j) as f64 * 0.11).cos()
        });
        let f = |h: &Head| {
            let (o, _) = e.forward(h, item, Role::Query).unwrap();
            o.dense.dot(&wd) + (&o.multi * &wm).sum()
        };
        let mut g = head.zeros_like();
        e.backward(
            &head,
            &cache,
            &TrainEmbedding::new(wd.clone(), wm.clone()),
            &mut g,
        );
        let h = 1e-6;
        for i in 0..12 {
            let mut up = head.clone();
            up.query_offset[i] += h;
            let mut dn = head.clone();
            dn.query_offset[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g.query_offset[i]).abs() < 1e-6);
        }
        for i in 0..16 {
            let mut up = head.clone();
            up.dense_scale[i] += h;
            let mut dn = head.clone();
            dn.dense_scale[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g.dense_scale[i]).abs() < 1e-6);
        }
        let mut up = head.clone();
        up.multi_proj[[3, 2]] += h;
        let mut dn = head.clone();
        dn.multi_proj[[3, 2]] -= h;
        assert!(((f(&up) - f(&dn)) / (2.0 * h) - g.multi_proj[[3, 2]]).abs() < 1e-6);
        assert_eq!(g.passage_offset.iter().filter(|v| **v != 0.0).count(), 0);
    }
}

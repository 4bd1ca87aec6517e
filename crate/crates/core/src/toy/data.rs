//! Synthetic bimodal data with class structure.
//!
//! Classes come in sibling groups that share a group direction, so items
//! from a sibling class are close but not matching. Each class owns a few
//! part prototypes; an item is a bag of 2..=8 tokens, each a noisy copy of
//! one part. Image items are additionally shifted by a fixed modality
//! offset.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_classes: usize,
    /// Per class and per modality.
    pub items_per_class: usize,
    /// Per class and per modality, taken from `items_per_class`.
    pub held_out_per_class: usize,
    /// Other classes sharing each class's sibling group.
    pub hard_negative_sibling_classes: usize,
    pub feature_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub parts_per_class: usize,
    /// Weight of the shared group direction in a class prototype.
    pub sibling_similarity: f64,
    pub part_spread: f64,
    pub token_noise: f64,
    /// Norm of the offset added to every image token.
    pub modality_offset: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 32,
            items_per_class: 12,
            held_out_per_class: 3,
            hard_negative_sibling_classes: 1,
            feature_dim: 12,
            min_tokens: 2,
            max_tokens: 8,
            parts_per_class: 4,
            sibling_similarity: 0.6,
            part_spread: 0.5,
            token_noise: 0.35,
            modality_offset: 0.6,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.items_per_class < 2 || self.held_out_per_class == 0 {
            return bad("items_per_class must be >= 2 and held_out_per_class >= 1");
        }
        if self.held_out_per_class + 2 > self.items_per_class {
            return bad("held_out_per_class must leave at least two training items per class");
        }
        if self.hard_negative_sibling_classes + 1 > self.n_classes {
            return bad("sibling group larger than the number of classes");
        }
        if self.feature_dim == 0 || self.parts_per_class == 0 {
            return bad("feature_dim and parts_per_class must be >= 1");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range must satisfy 1 <= min_tokens <= max_tokens");
        }
        let reals = [
            self.sibling_similarity,
            self.part_spread,
            self.token_noise,
            self.modality_offset,
        ];
        if reals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.sibling_similarity >= 1.0 {
            return bad("generator scales must be finite, >= 0, and sibling_similarity < 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub id: String,
    pub latent_class: usize,
    pub modality: Modality,
    /// `t x f` token features.
    pub tokens: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub items: Vec<SyntheticItem>,
    /// Indices into `items`.
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
    /// Sibling classes of each class (its hard-negative sources).
    pub siblings: Vec<Vec<usize>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut *rng))
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    loop {
        let v = gaussian(rng, n);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Deterministic given `seed` and `config`.
pub fn generate_synthetic(seed: u64, config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = config.feature_dim;
    let group = config.hard_negative_sibling_classes + 1;
    let n_groups = config.n_classes.div_ceil(group);
    let group_dirs: Vec<Array1<f64>> = (0..n_groups).map(|_| unit(&mut rng, f)).collect();
    let a = config.sibling_similarity;
    let b = (1.0 - a * a).sqrt();
    let parts: Vec<Vec<Array1<f64>>> = (0..config.n_classes)
        .map(|c| {
            let proto = &group_dirs[c / group] * a + unit(&mut rng, f) * b;
            (0..config.parts_per_class)
                .map(|_| {
                    &proto + &(gaussian(&mut rng, f) * (config.part_spread / (f as f64).sqrt()))
                })
                .collect()
        })
        .collect();
    let siblings = (0..config.n_classes)
        .map(|c| {
            let g = c / group;
            (g * group..((g + 1) * group).min(config.n_classes))
                .filter(|&o| o != c)
                .collect()
        })
        .collect();
    let offset = unit(&mut rng, f) * config.modality_offset;
    let noise = config.token_noise / (f as f64).sqrt();

    let mut items = Vec::new();
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for c in 0..config.n_classes {
        for modality in [Modality::Text, Modality::Image] {
            for i in 0..config.items_per_class {
                let t = rng.random_range(config.min_tokens..=config.max_tokens);
                let mut tokens = Array2::zeros((t, f));
                for mut row in tokens.rows_mut() {
                    let part = &parts[c][rng.random_range(0..config.parts_per_class)];
                    let mut v = part + &(gaussian(&mut rng, f) * noise);
                    if modality == Modality::Image {
                        v += &offset;
                    }
                    row.assign(&v);
                }
                let tag = match modality {
                    Modality::Text => "t",
                    Modality::Image => "i",
                };
                let idx = items.len();
                if i < config.items_per_class - config.held_out_per_class {
                    train.push(idx);
                } else {
                    held_out.push(idx);
                }
                items.push(SyntheticItem {
                    id: format!("c{c:03}-{tag}{i:02}"),
                    latent_class: c,
                    modality,
                    tokens,
                });
            }
        }
    }
    Ok(Dataset {
        config: config.clone(),
        items,
        train,
        held_out,
        siblings,
    })
}

/// Which split of a dataset to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::HeldOut => &self.held_out,
        }
    }

    /// Item indices of `class` and `modality` within `split`.
    pub fn members(&self, split: Split, class: usize, modality: Modality) -> Vec<usize> {
        self.split(split)
            .iter()
            .copied()
            .filter(|&i| self.items[i].latent_class == class && self.items[i].modality == modality)
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// Up to `n` distinct classes, so in-batch negatives never share a class.
    pub fn sample_classes(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        let mut classes: Vec<usize> = (0..self.n_classes()).collect();
        classes.shuffle(rng);
        classes.truncate(n);
        classes
    }
}

/// Cosine of mean-pooled raw token features.
pub fn raw_cosine(a: &SyntheticItem, b: &SyntheticItem) -> f64 {
    let ma = a.tokens.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let mb = b.tokens.mean_axis(ndarray::Axis(0)).expect("nonempty");
    ma.dot(&mb) / (ma.dot(&ma).sqrt() * mb.dot(&mb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let c = DataConfig::default();
        assert_eq!(
            generate_synthetic(7, &c).unwrap(),
            generate_synthetic(7, &c).unwrap()
        );
        assert_ne!(
            generate_synthetic(7, &c).unwrap(),
            generate_synthetic(8, &c).unwrap()
        );
    }

    #[test]
    fn sizes_and_split() {
        let c = DataConfig::default();
        let d = generate_synthetic(1, &c).unwrap();
        assert_eq!(d.items.len(), 32 * 12 * 2);
        assert_eq!(d.held_out.len(), 32 * 3 * 2);
        assert!(d
            .items
            .iter()
            .all(|i| (2..=8).contains(&i.tokens.nrows()) && i.tokens.ncols() == 12));
        assert_eq!(d.siblings[0], vec![1]);
        assert_eq!(d.members(Split::HeldOut, 5, Modality::Image).len(), 3);
    }

    #[test]
    fn degenerate_sizes_rejected() {
        let c = DataConfig {
            n_classes: 1,
            ..DataConfig::default()
        };
        assert!(generate_synthetic(1, &c).is_err());
        let c = DataConfig {
            held_out_per_class: 11,
            ..DataConfig::default()
        };
        assert!(generate_synthetic(1, &c).is_err());
    }
}

//! Shared-encoder versus two-tower modality gap on identical data.

use serde::Serialize;

use super::data::{generate_synthetic, Dataset, Split};
use super::encoder::{BackboneKind, Task, ToyEncoder};
use super::train::{train_phase1_with, ToyConfig};
use crate::diagnostics::{alignment_score, modality_gap, Bins, ModalityGap};
use crate::embed::{DenseVector, EmbeddingRecord, Modality, Role};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSide {
    pub backbone: BackboneKind,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub alignment_score: f64,
    pub modality_gap: ModalityGap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub seed: u64,
    pub shared: GapSide,
    pub two_tower: GapSide,
    /// `shared.gap < two_tower.gap`.
    pub shared_smaller: bool,
}

/// Held-out matched pairs: text `i` of a class with image `i` (cross-modal)
/// and with text `i + 1` (same-modal). Both sides are encoded as passages.
fn measure(enc: &ToyEncoder, d: &Dataset, bins: &Bins) -> Result<(f64, ModalityGap)> {
    let encode = |i: usize| enc.encode(&d.items[i], Task::Retrieval, Role::Passage);
    let mut cross: Vec<(EmbeddingRecord, EmbeddingRecord)> = Vec::new();
    let mut same = Vec::new();
    for c in 0..d.n_classes() {
        let text = d.members(Split::HeldOut, c, Modality::Text);
        let image = d.members(Split::HeldOut, c, Modality::Image);
        for (k, &t) in text.iter().enumerate() {
            if let Some(&im) = image.get(k) {
                cross.push((encode(t)?, encode(im)?));
            }
            if text.len() > 1 {
                same.push((encode(t)?, encode(text[(k + 1) % text.len()])?));
            }
        }
    }
    let (cv, sv) = (dense_pairs(&cross), dense_pairs(&same));
    Ok((alignment_score(&cv)?, modality_gap(&cv, &sv, bins)?))
}

fn dense_pairs(v: &[(EmbeddingRecord, EmbeddingRecord)]) -> Vec<(&DenseVector, &DenseVector)> {
    v.iter().map(|(a, b)| (&a.dense, &b.dense)).collect()
}

/// Trains a shared-backbone and a two-tower model with the same phase-1
/// budget and batches, then compares their modality gaps.
pub fn modality_gap_experiment(seed: u64, config: &ToyConfig) -> Result<GapReport> {
    let d = generate_synthetic(seed, &config.data)?;
    let bins = Bins::default();
    let side = |kind| -> Result<GapSide> {
        let (enc, report) = train_phase1_with(&d, config, seed, kind)?;
        let (alignment, gap) = measure(&enc, &d, &bins)?;
        Ok(GapSide {
            backbone: kind,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            alignment_score: alignment,
            modality_gap: gap,
        })
    };
    let shared = side(BackboneKind::Shared)?;
    let two_tower = side(BackboneKind::TwoTower)?;
    Ok(GapReport {
        seed,
        shared_smaller: shared.modality_gap.gap < two_tower.modality_gap.gap,
        shared,
        two_tower,
    })
}

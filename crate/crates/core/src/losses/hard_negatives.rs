use ndarray::Array2;

use super::{info_nce_plus, BatchGrad, LossValueAndGrad, PairScores, TrainEmbedding};
use crate::embed::ScoreMode;
use crate::error::{Error, Result};

/// A query, its matching passage, and `m` hard negatives.
#[derive(Debug, Clone)]
pub struct HardNegativeEntry {
    pub query: TrainEmbedding,
    pub positive: TrainEmbedding,
    pub negatives: Vec<TrainEmbedding>,
}

/// Batch of `k` entries sharing the same negative count `m`.
#[derive(Debug, Clone)]
pub struct HardNegativeBatch {
    entries: Vec<HardNegativeEntry>,
    negatives: usize,
}

impl HardNegativeBatch {
    pub fn new(entries: Vec<HardNegativeEntry>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::invalid("hard-negative batch is empty"))?;
        let m = first.negatives.len();
        if let Some(bad) = entries.iter().position(|e| e.negatives.len() != m) {
            return Err(Error::invalid(format!(
                "ragged hard-negative batch: entry 0 has {m} negatives, entry {bad} has {}",
                entries[bad].negatives.len()
            )));
        }
        Ok(Self {
            entries,
            negatives: m,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn negatives_per_query(&self) -> usize {
        self.negatives
    }

    pub fn entries(&self) -> &[HardNegativeEntry] {
        &self.entries
    }

    pub fn queries(&self) -> Vec<TrainEmbedding> {
        self.entries.iter().map(|e| e.query.clone()).collect()
    }

    /// Column order of the score matrix: the `k` positives, then entry 0's
    /// negatives, entry 1's negatives, and so on.
    pub fn passages(&self) -> Vec<TrainEmbedding> {
        let mut out: Vec<TrainEmbedding> =
            self.entries.iter().map(|e| e.positive.clone()).collect();
        for e in &self.entries {
            out.extend(e.negatives.iter().cloned());
        }
        out
    }

    /// `k x k(1+m)` scores; row `r`'s positive is column `r`.
    pub fn scores(&self, mode: ScoreMode) -> Result<PairScores> {
        PairScores::compute(&self.queries(), &self.passages(), mode)
    }

    /// Maps a score gradient back to the batch embeddings.
    pub fn backward(&self, mode: ScoreMode, grad: &Array2<f64>) -> Result<BatchGrad> {
        let q = self.queries();
        let p = self.passages();
        let ps = PairScores::compute(&q, &p, mode)?;
        let mut g = BatchGrad::zeros(&q, &p);
        ps.backward(&q, &p, grad, &mut g.queries, &mut g.passages);
        Ok(g)
    }
}

/// InfoNCE whose denominator spans every in-batch positive and every
/// in-batch hard negative. Gradient is with respect to the score matrix
/// returned by [`HardNegativeBatch::scores`].
pub fn info_nce_hard_negatives(
    batch: &HardNegativeBatch,
    mode: ScoreMode,
    tau: f64,
) -> Result<LossValueAndGrad> {
    let ps = batch.scores(mode)?;
    info_nce_plus(&ps.scores, tau)
}

use ndarray::Array2;

use super::{
    check_tau, cosent_from_scores, info_nce, info_nce_plus, BatchGrad, LossConfig,
    LossValueAndGrad, PairScores, TrainEmbedding,
};
use crate::error::{Error, Result};

/// Contrastive objective applied to a `queries x passages` score matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchObjective {
    /// Square batch, positives on the diagonal.
    InfoNce,
    /// `k` queries against `k` positives followed by `k*m` hard negatives
    /// (layout of [`HardNegativeBatch::passages`](super::HardNegativeBatch::passages)).
    InfoNcePlus { negatives: usize },
    /// Square batch of pairs `(q_i, p_i)`. Pairs with a ground-truth score
    /// go through CoSENT on their own similarity; the rest form an in-batch
    /// InfoNCE over the submatrix of unscored pairs. The two are summed.
    TextMatching { ground_truth: Vec<Option<f64>> },
}

impl BatchObjective {
    /// Checks that a `rows x cols` score matrix fits this objective.
    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        let expected = match self {
            BatchObjective::InfoNce => rows,
            BatchObjective::InfoNcePlus { negatives } => rows * (1 + negatives),
            BatchObjective::TextMatching { ground_truth } => {
                if ground_truth.len() != rows {
                    return Err(Error::invalid(format!(
                        "{} ground-truth slots for {rows} pairs",
                        ground_truth.len()
                    )));
                }
                rows
            }
        };
        if cols != expected {
            return Err(Error::invalid(format!(
                "objective expects {rows}x{expected} scores, got {rows}x{cols}"
            )));
        }
        Ok(())
    }

    /// Value and gradient with respect to every entry of `s`.
    pub fn evaluate(&self, s: &Array2<f64>, tau: f64) -> Result<LossValueAndGrad> {
        self.check_shape(s.nrows(), s.ncols())?;
        match self {
            BatchObjective::InfoNce => info_nce(s, tau),
            BatchObjective::InfoNcePlus { .. } => info_nce_plus(s, tau),
            BatchObjective::TextMatching { ground_truth } => text_matching(s, ground_truth, tau),
        }
    }
}

fn text_matching(s: &Array2<f64>, truth: &[Option<f64>], tau: f64) -> Result<LossValueAndGrad> {
    check_tau(tau)?;
    let n = s.nrows();
    let mut value = 0.0;
    let mut grad = Array2::zeros(s.raw_dim());
    if truth.iter().any(Option::is_some) {
        let diag: Vec<f64> = (0..n).map(|i| s[[i, i]]).collect();
        let c = cosent_from_scores(&diag, truth, tau)?;
        value += c.value;
        for i in 0..n {
            grad[[i, i]] += c.grad[i];
        }
    }
    let unscored: Vec<usize> = (0..n).filter(|&i| truth[i].is_none()).collect();
    if !unscored.is_empty() {
        let sub = Array2::from_shape_fn((unscored.len(), unscored.len()), |(a, b)| {
            s[[unscored[a], unscored[b]]]
        });
        let l = info_nce(&sub, tau)?;
        value += l.value;
        for (a, &i) in unscored.iter().enumerate() {
            for (b, &j) in unscored.iter().enumerate() {
                grad[[i, j]] += l.grad[[a, b]];
            }
        }
    }
    Ok(LossValueAndGrad { value, grad })
}

/// `Σ_k weight_k · objective(cosines of prefixes of length k)`, with the
/// gradient pushed back to the dense components of every input.
pub fn matryoshka_wrap(
    objective: &BatchObjective,
    queries: &[TrainEmbedding],
    passages: &[TrainEmbedding],
    config: &LossConfig,
) -> Result<LossValueAndGrad<BatchGrad>> {
    objective.check_shape(queries.len(), passages.len())?;
    let mut value = 0.0;
    let mut grad = BatchGrad::zeros(queries, passages);
    for (&k, &w) in config
        .truncation
        .dims()
        .iter()
        .zip(&config.matryoshka_weights)
    {
        let ps = PairScores::dense(queries, passages, k)?;
        if w == 0.0 {
            continue;
        }
        let l = objective.evaluate(&ps.scores, config.tau)?;
        value += w * l.value;
        ps.backward(
            queries,
            passages,
            &(l.grad * w),
            &mut grad.queries,
            &mut grad.passages,
        );
    }
    Ok(LossValueAndGrad { value, grad })
}

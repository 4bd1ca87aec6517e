//! Training objectives with hand-derived gradients.
//!
//! Score-level losses (`info_nce`, `kl_distillation`, `cosent_from_scores`)
//! take similarity values and return the gradient with respect to every
//! input entry. Embedding-level losses (`matryoshka_wrap`, `joint_loss`)
//! chain those through [`PairScores`] back to raw embedding components.
//!
//! All computation here is `f64`.

mod config;
mod cosent;
mod distill;
mod hard_negatives;
mod joint;
mod layer;
mod matryoshka;
mod softmax;

use ndarray::{Array1, Array2};

pub use config::LossConfig;
pub use cosent::{cosent, cosent_from_scores, StsPair};
pub use distill::kl_distillation;
pub use hard_negatives::{info_nce_hard_negatives, HardNegativeBatch, HardNegativeEntry};
pub use joint::{
    joint_loss, joint_loss_with_teacher, late_teacher, JointLoss, PairBatch, TERM_NAMES,
};
pub use layer::{min_maxsim_margin, PairScores};
pub use matryoshka::{matryoshka_wrap, BatchObjective};
pub use softmax::{info_nce, info_nce_plus, log_softmax_row};

/// Loss value with its gradient. `G` has the shape of whatever the loss
/// was differentiated against.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrad<G = Array2<f64>> {
    pub value: f64,
    pub grad: G,
}

/// Raw (unnormalized) model outputs for one input, as seen by the losses.
/// Cosines normalize internally, so gradients are taken with respect to
/// these raw components.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEmbedding {
    pub dense: Array1<f64>,
    /// `t x d` token rows.
    pub multi: Array2<f64>,
}

impl TrainEmbedding {
    pub fn new(dense: Array1<f64>, multi: Array2<f64>) -> Self {
        Self { dense, multi }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dense: Array1::zeros(self.dense.len()),
            multi: Array2::zeros(self.multi.raw_dim()),
        }
    }

    fn add_scaled(&mut self, other: &TrainEmbedding, w: f64) {
        self.dense.scaled_add(w, &other.dense);
        self.multi.scaled_add(w, &other.multi);
    }
}

/// Gradients for every query and passage of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub queries: Vec<TrainEmbedding>,
    pub passages: Vec<TrainEmbedding>,
}

impl BatchGrad {
    pub fn zeros(queries: &[TrainEmbedding], passages: &[TrainEmbedding]) -> Self {
        Self {
            queries: queries.iter().map(TrainEmbedding::zeros_like).collect(),
            passages: passages.iter().map(TrainEmbedding::zeros_like).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &BatchGrad, w: f64) {
        for (a, b) in self.queries.iter_mut().zip(&other.queries) {
            a.add_scaled(b, w);
        }
        for (a, b) in self.passages.iter_mut().zip(&other.passages) {
            a.add_scaled(b, w);
        }
    }
}

pub(crate) fn check_tau(tau: f64) -> crate::Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(crate::Error::invalid(format!(
            "temperature must be > 0, got {tau}"
        )))
    }
}

pub(crate) fn check_finite_matrix(s: &Array2<f64>, what: &str) -> crate::Result<()> {
    if s.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(what.to_string()))
    }
}

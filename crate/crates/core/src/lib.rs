//! Dual-mode embedding toolkit: dense and late-interaction scoring,
//! contrastive / distillation training objectives with analytic gradients,
//! exhaustive retrieval, IR metrics, and embedding-space diagnostics.

pub mod diagnostics;
pub mod embed;
pub mod error;
pub mod eval;
pub mod format;
pub mod gradcheck;
pub mod losses;
pub mod retrieval;
pub mod toy;

pub use embed::{
    cosine, late_interaction_score, mean_pool, normalize, normalized_late_score, similarity_matrix,
    truncate, DenseVector, EmbeddingRecord, Modality, MultiVector, Role, ScoreMode,
    SimilarityMatrix, TruncationSchedule,
};
pub use error::{Error, Result};

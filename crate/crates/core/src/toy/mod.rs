//! Desk-scale reproduction of two-phase training on synthetic bimodal data.

pub mod data;
pub mod encoder;
pub mod gap;
pub mod train;

pub use data::{generate_synthetic, raw_cosine, DataConfig, Dataset, Split, SyntheticItem};
pub use encoder::{BackboneKind, Head, Task, ToyEncoder};
pub use gap::{modality_gap_experiment, GapReport, GapSide};
pub use train::{
    evaluate_held_out, make_scored_pairs, mine_triplets, phase2_data, train_all, train_phase1,
    train_phase1_with, train_phase2, FullTrainingReport, HeldOutMetrics, Phase2Data, ScoredPair,
    StepLoss, ToyConfig, TrainRunReport, Triplet,
};

//! Staging Alzheimer's disease from structural MRI with an ensemble of three
//! DenseNets trained on tri-plane slice patches.
//!
//! Stages: [`ingest`] reads cohorts and volumes, [`preprocess`] cuts and
//! normalises patches, [`splits`] builds subject-level folds, [`model`] and
//! [`training`] build and fit the networks, [`ensemble`] votes, and
//! [`evaluation`] scores and renders tables.

pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod model;
pub mod preprocess;
pub mod splits;
pub mod training;

pub use ensemble::{aggregate_subject, majority_vote, majority_vote_detailed, soft_vote, PredictionRecord, VoteOutcome};
pub use error::{Error, Result};
pub use evaluation::{classification_report, confusion_matrix, ClassMetrics, ClassificationReport, ConfusionMatrix};
pub use ingest::{ClassLabel, MriVolume, SubjectRecord, NUM_CLASSES};
pub use model::{build_densenet, BuildOptions, DenseNetConfig, ModelHandle};
pub use preprocess::{PatchMeta, Plane, PlanePatch};
pub use splits::{stratified_kfold, FoldPlan, FoldSet, SplitRole};
pub use training::{train_model, CheckpointRecord, Logits, Posteriors, Target, TrainConfig};

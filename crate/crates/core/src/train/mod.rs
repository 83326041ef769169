//! Training, evaluation protocol and metrics.

pub mod corpus;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod splits;
pub mod trainer;

pub use corpus::{Corpus, Sample, SessionData};
pub use metrics::{auc_roc, mean_ci, prf_metrics, MetricError, Prf};
pub use pipeline::{
    horizon_sweep, run_fold, run_knn_cv, run_nested_cv, CvConfig, ExperimentConfig, FoldResult,
    TrainedFold, DEFAULT_HORIZONS,
};
pub use splits::{balanced_batches, nested_cv_splits, positives_per_batch, FoldSplit};
pub use trainer::{
    predict_proba, pretrain_autoencoder, train_model, Curves, TrainConfig, TrainOutcome,
};

use crate::baselines::BaselineError;
use crate::diff::DiffError;
use crate::preprocess::PreprocessError;
use crate::segmentation::SegmentError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{have} subjects are too few for {folds}-fold nested cross-validation")]
    TooFewSubjects { have: usize, folds: usize },
    #[error("training fold has no positive windows")]
    NoPositives,
    #[error("training fold has no negative windows")]
    NoNegatives,
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("no unlabeled windows to pretrain on")]
    EmptyCorpus,
    #[error("class {0} absent from the training subjects")]
    MissingClassInTrain(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Fragment-based CNN ensemble detection.

mod decision;
mod ensemble;
mod model;
mod train;

pub use decision::{
    confidence_metrics, confidence_verdict, decide, eta_grid, fit_confidence_threshold,
    fit_general_threshold, fit_thresholds, general_candidates, general_f1, general_verdict,
    metrics, ConfidenceFit, Decision, Metrics, Strategy, Thresholds, Verdict,
};
pub use ensemble::{member_file, train_ensemble, Ensemble, EnsembleConfig, Score, TrainedEnsemble};
pub use model::{
    gradient_check, CnnShape, CnnWeights, Forward, InferenceCnn, Mode, CHECKPOINT_KIND,
};
pub use train::{
    app_log_loss, minibatches, select_ensemble, train_single, Snapshot, SnapshotSummary,
    TrainConfig,
};

//! Baselines, residual scores, POT thresholds and incident labels.

pub mod baseline;
pub mod labels;
pub mod pot;

pub use baseline::BaselineTable;
pub use labels::{
    forecast_scores, generate_ground_truth, label, true_scores, Calibration, IncidentLabels,
    Scores, Thresholds,
};
pub use pot::{fit_gpd, GpdFit, PercentilePreset, PotConfig, ThresholdState};

//! Feature series container, dataset files, statistics and a synthetic
//! traffic generator.

pub mod io;
pub mod series;
pub mod stats;
pub mod synth;

pub use io::{load_dataset, save_dataset, DatasetMeta};
pub use series::{FeatureSeries, Normalizer};
pub use stats::{stats, DatasetStats};
pub use synth::{synth_traffic, Incident, IncidentSpec, SynthConfig, SynthData};

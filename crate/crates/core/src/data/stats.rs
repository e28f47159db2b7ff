use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::io::DatasetMeta;
use super::series::FeatureSeries;
use crate::graph::RoadGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub meta: DatasetMeta,
    pub features: Vec<FeatureStats>,
}

pub fn stats(name: &str, series: &FeatureSeries, graph: &RoadGraph) -> DatasetStats {
    let d = series.n_features();
    let mut acc: Vec<(f64, f64, f64)> = vec![(f64::INFINITY, 0.0, f64::NEG_INFINITY); d];
    for (i, &v) in series.data().iter().enumerate() {
        let a = &mut acc[i % d];
        a.0 = a.0.min(v);
        a.1 += v;
        a.2 = a.2.max(v);
    }
    let count = (series.len() * series.n_nodes()).max(1) as f64;
    let features = acc
        .into_iter()
        .zip(&series.feature_names)
        .map(|((min, sum, max), name)| FeatureStats {
            name: name.clone(),
            min,
            // keeps min = mean = max exact for constant features
            mean: if min == max { min } else { sum / count },
            max,
        })
        .collect();
    DatasetStats {
        meta: DatasetMeta::describe(name, series, graph),
        features,
    }
}

impl DatasetStats {
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>10} {:>10}",
            "dataset", "timesteps", "nodes", "edges", "features"
        );
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>10} {:>10}",
            m.name,
            m.timesteps,
            m.n_nodes,
            m.n_edges.unwrap_or(0),
            m.n_features
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>12} {:>12}",
            "feature", "min", "mean", "max"
        );
        for f in &self.features {
            let _ = writeln!(
                out,
                "{:<12} {:>12.4} {:>12.4} {:>12.4}",
                f.name, f.min, f.mean, f.max
            );
        }
        out
    }
}

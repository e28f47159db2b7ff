//! Dataset directory: `meta.json`, `features.bin` (little-endian `f64`,
//! time-major, then node, then feature) and `edges.csv`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::series::FeatureSeries;
use crate::error::{Error, Result};
use crate::graph::RoadGraph;

pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const EDGES_FILE: &str = "edges.csv";

/// Features of the signal-cycle dataset, in column order.
pub const RADSET_FEATURES: [&str; 7] = ["del", "flow", "flow_raw", "cong", "cong_raw", "occ", "ql"];

const KNOWN_KEYS: [&str; 8] = [
    "name",
    "T",
    "N",
    "E",
    "D",
    "delta_seconds",
    "start_epoch",
    "feature_names",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(rename = "N")]
    pub n_nodes: usize,
    /// Undirected edge count; optional on disk, filled in on load.
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub n_edges: Option<usize>,
    #[serde(rename = "D")]
    pub n_features: usize,
    pub delta_seconds: u64,
    pub start_epoch: i64,
    pub feature_names: Vec<String>,
}

impl DatasetMeta {
    pub fn describe(name: &str, series: &FeatureSeries, graph: &RoadGraph) -> Self {
        DatasetMeta {
            name: name.to_string(),
            timesteps: series.len(),
            n_nodes: series.n_nodes(),
            n_edges: Some(graph.n_edges()),
            n_features: series.n_features(),
            delta_seconds: series.delta_seconds,
            start_epoch: series.start_epoch,
            feature_names: series.feature_names.clone(),
        }
    }

    pub fn is_radset_schema(&self) -> bool {
        self.feature_names
            .iter()
            .map(String::as_str)
            .eq(RADSET_FEATURES)
    }
}

fn require(dir: &Path, file: &str) -> Result<PathBuf> {
    let p = dir.join(file);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingFile {
            path: p.display().to_string(),
        })
    }
}

fn parse_meta(text: &str) -> Result<DatasetMeta> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    if let Some(obj) = raw.as_object() {
        for key in obj.keys().filter(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            log::warn!("{META_FILE}: ignoring unknown field `{key}`");
        }
    }
    Ok(serde_json::from_value(raw)?)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(FeatureSeries, RoadGraph, DatasetMeta)> {
    let dir = dir.as_ref();
    let meta_path = require(dir, META_FILE)?;
    let features_path = require(dir, FEATURES_FILE)?;
    let edges_path = require(dir, EDGES_FILE)?;

    let mut meta = parse_meta(&fs::read_to_string(meta_path)?)?;
    if meta.is_radset_schema() {
        log::info!("{}: signal-cycle feature schema", meta.name);
    }
    let blob = fs::read(features_path)?;
    let values = meta.timesteps * meta.n_nodes * meta.n_features;
    let expected = values * 8;
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "{FEATURES_FILE} holds {} bytes, but T={} N={} D={} needs {expected} bytes",
            blob.len(),
            meta.timesteps,
            meta.n_nodes,
            meta.n_features
        )));
    }
    let data = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let series = FeatureSeries::new(
        (meta.timesteps, meta.n_nodes, meta.n_features),
        data,
        meta.start_epoch,
        meta.delta_seconds,
        meta.feature_names.clone(),
    )?;
    let graph = RoadGraph::read_edge_csv(meta.n_nodes, fs::File::open(edges_path)?)?;
    match meta.n_edges {
        Some(e) if e != graph.n_edges() => {
            return Err(Error::Structural(format!(
                "{META_FILE} declares {e} edges, {EDGES_FILE} has {}",
                graph.n_edges()
            )))
        }
        _ => meta.n_edges = Some(graph.n_edges()),
    }
    Ok((series, graph, meta))
}

pub fn save_dataset(
    dir: impl AsRef<Path>,
    name: &str,
    series: &FeatureSeries,
    graph: &RoadGraph,
) -> Result<DatasetMeta> {
    let dir = dir.as_ref();
    if graph.n_nodes() != series.n_nodes() {
        return Err(Error::Structural(format!(
            "graph has {} nodes, series {}",
            graph.n_nodes(),
            series.n_nodes()
        )));
    }
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta::describe(name, series, graph);
    fs::write(
        dir.join(META_FILE),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    let mut w = BufWriter::new(fs::File::create(dir.join(FEATURES_FILE))?);
    for v in series.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join(EDGES_FILE))?);
    graph.write_edge_csv(&mut w)?;
    w.flush()?;
    Ok(meta)
}

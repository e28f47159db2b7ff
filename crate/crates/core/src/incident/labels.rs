use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::baseline::BaselineTable;
use super::pot::{PotConfig, ThresholdState};
use crate::data::FeatureSeries;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::parallel::ExecMode;

pub const LABELS_CSV_HEADER: &str = "timestep,link_id,score,threshold,label";

/// Residual scores for a run of target timesteps: the network score is the
/// Frobenius norm of baseline minus features, the link score the norm of
/// one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub timesteps: Vec<usize>,
    pub network: Vec<f64>,
    /// `len × n_links`, timestep-major.
    pub links: Vec<f64>,
    pub n_links: usize,
}

impl Scores {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn link_row(&self, i: usize) -> &[f64] {
        &self.links[i * self.n_links..(i + 1) * self.n_links]
    }

    pub fn link_stream(&self, link: usize) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.links[i * self.n_links + link])
            .collect()
    }
}

/// `(network, per-link)` residual of one flattened `N×D` matrix.
pub fn residual(baseline: &[f64], x: &[f64], n_features: usize) -> (f64, Vec<f64>) {
    let links: Vec<f64> = baseline
        .chunks(n_features)
        .zip(x.chunks(n_features))
        .map(|(b, v)| b.iter().zip(v).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .collect();
    let network = links.iter().sum::<f64>().sqrt();
    (network, links.into_iter().map(f64::sqrt).collect())
}

fn assemble(timesteps: &[usize], rows: Vec<(f64, Vec<f64>)>, n_links: usize) -> Scores {
    let mut network = Vec::with_capacity(rows.len());
    let mut links = Vec::with_capacity(rows.len() * n_links);
    for (s, l) in rows {
        network.push(s);
        links.extend(l);
    }
    Scores {
        timesteps: timesteps.to_vec(),
        network,
        links,
        n_links,
    }
}

/// Scores of the observed series at `timesteps`.
pub fn true_scores(
    table: &BaselineTable,
    series: &FeatureSeries,
    timesteps: &[usize],
    exec: ExecMode,
) -> Result<Scores> {
    if let Some(&t) = timesteps.iter().find(|&&t| t >= series.len()) {
        return Err(Error::Index {
            index: t,
            len: series.len(),
        });
    }
    let d = series.n_features();
    let rows = exec.map(timesteps, |&t| {
        residual(table.at(series, t), series.frame_slice(t), d)
    });
    Ok(assemble(timesteps, rows, series.n_nodes()))
}

/// Scores of forecast matrices; `frames[i]` is the forecast for
/// `timesteps[i]`, whose calendar position comes from `series`.
pub fn forecast_scores(
    table: &BaselineTable,
    series: &FeatureSeries,
    timesteps: &[usize],
    frames: &[Tensor],
    exec: ExecMode,
) -> Result<Scores> {
    if frames.len() != timesteps.len() {
        return Err(Error::arg(format!(
            "{} forecasts for {} timesteps",
            frames.len(),
            timesteps.len()
        )));
    }
    let width = series.n_nodes() * series.n_features();
    if let Some(f) = frames.iter().find(|f| f.numel() != width) {
        return Err(Error::dims(
            "forecast_scores",
            f.shape(),
            &[series.n_nodes(), series.n_features()],
        ));
    }
    let d = series.n_features();
    let pairs: Vec<(usize, &Tensor)> = timesteps.iter().copied().zip(frames).collect();
    let rows = exec.map(&pairs, |&(t, f)| residual(table.at(series, t), f.data(), d));
    Ok(assemble(timesteps, rows, series.n_nodes()))
}

/// Calibrated threshold states for the network score and every link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub config: PotConfig,
    pub network: ThresholdState,
    pub links: Vec<ThresholdState>,
}

/// Threshold sequences aligned with a score stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub network: Vec<f64>,
    /// One sequence per link.
    pub links: Vec<Vec<f64>>,
}

impl Calibration {
    pub fn fit(calibration: &Scores, config: &PotConfig, exec: ExecMode) -> Result<Self> {
        let network = ThresholdState::fit(&calibration.network, config)?;
        let links: Vec<usize> = (0..calibration.n_links).collect();
        let links = exec
            .map(&links, |&l| {
                ThresholdState::fit(&calibration.link_stream(l), config)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Calibration {
            config: *config,
            network,
            links,
        })
    }

    /// Runs fresh copies of the states over `stream`.
    pub fn thresholds(&self, stream: &Scores, exec: ExecMode) -> Result<Thresholds> {
        if stream.n_links != self.links.len() {
            return Err(Error::arg(format!(
                "stream has {} links, calibration {}",
                stream.n_links,
                self.links.len()
            )));
        }
        let dynamic = self.config.dynamic;
        let network = self.network.clone().thresholds(&stream.network, dynamic)?;
        let ids: Vec<usize> = (0..self.links.len()).collect();
        let links = exec
            .map(&ids, |&l| {
                self.links[l]
                    .clone()
                    .thresholds(&stream.link_stream(l), dynamic)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Thresholds { network, links })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStream {
    pub scores: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabelStream {
    fn new(scores: Vec<f64>, thresholds: Vec<f64>) -> Self {
        let labels = scores
            .iter()
            .zip(&thresholds)
            .map(|(s, p)| s >= p)
            .collect();
        LabelStream {
            scores,
            thresholds,
            labels,
        }
    }
}

/// Network-level and per-link incident labels for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentLabels {
    pub horizon: usize,
    pub timesteps: Vec<usize>,
    pub network: LabelStream,
    pub links: Vec<LabelStream>,
}

impl IncidentLabels {
    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    /// Links labelled at position `i`.
    pub fn flagged_links(&self, i: usize) -> Vec<usize> {
        (0..self.links.len())
            .filter(|&l| self.links[l].labels[i])
            .collect()
    }

    pub fn link_scores(&self, i: usize) -> Vec<f64> {
        self.links.iter().map(|s| s.scores[i]).collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{LABELS_CSV_HEADER}")?;
        for (i, t) in self.timesteps.iter().enumerate() {
            let n = &self.network;
            writeln!(
                w,
                "{t},-1,{},{},{}",
                n.scores[i],
                n.thresholds[i],
                u8::from(n.labels[i])
            )?;
            for (l, s) in self.links.iter().enumerate() {
                writeln!(
                    w,
                    "{t},{l},{},{},{}",
                    s.scores[i],
                    s.thresholds[i],
                    u8::from(s.labels[i])
                )?;
            }
        }
        Ok(())
    }

    /// Reads the CSV layout written by [`IncidentLabels::write_csv`].
    pub fn read_csv(reader: impl BufRead, horizon: usize) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != LABELS_CSV_HEADER {
            return Err(Error::Format(format!(
                "labels header `{header}`, expected `{LABELS_CSV_HEADER}`"
            )));
        }
        let mut timesteps: Vec<usize> = Vec::new();
        let mut network = (vec![], vec![], vec![]);
        let mut links: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = Vec::new();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("labels row {}: `{line}`", row + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let t: usize = f[0].trim().parse().map_err(|_| bad())?;
            let link: i64 = f[1].trim().parse().map_err(|_| bad())?;
            let score: f64 = f[2].trim().parse().map_err(|_| bad())?;
            let threshold: f64 = f[3].trim().parse().map_err(|_| bad())?;
            let label = match f[4].trim() {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            if link < 0 {
                timesteps.push(t);
                network.0.push(score);
                network.1.push(threshold);
                network.2.push(label);
                continue;
            }
            let link = link as usize;
            let i = timesteps.len().checked_sub(1).ok_or_else(bad)?;
            if timesteps[i] != t {
                return Err(bad());
            }
            if link >= links.len() {
                if i > 0 {
                    return Err(bad());
                }
                links.resize(link + 1, Default::default());
            }
            let s = &mut links[link];
            if s.0.len() != i {
                return Err(bad());
            }
            s.0.push(score);
            s.1.push(threshold);
            s.2.push(label);
        }
        if links.iter().any(|s| s.0.len() != timesteps.len()) {
            return Err(Error::Format("labels file has incomplete link rows".into()));
        }
        let stream = |(scores, thresholds, labels)| LabelStream {
            scores,
            thresholds,
            labels,
        };
        Ok(IncidentLabels {
            horizon,
            timesteps,
            network: stream(network),
            links: links.into_iter().map(stream).collect(),
        })
    }
}

/// Applies threshold sequences to a score stream.
pub fn label(scores: &Scores, thresholds: &Thresholds, horizon: usize) -> Result<IncidentLabels> {
    if thresholds.network.len() != scores.len()
        || thresholds.links.len() != scores.n_links
        || thresholds.links.iter().any(|l| l.len() != scores.len())
    {
        return Err(Error::arg(
            "thresholds are not aligned with the score stream",
        ));
    }
    let links = (0..scores.n_links)
        .map(|l| LabelStream::new(scores.link_stream(l), thresholds.links[l].clone()))
        .collect();
    Ok(IncidentLabels {
        horizon,
        timesteps: scores.timesteps.clone(),
        network: LabelStream::new(scores.network.clone(), thresholds.network.clone()),
        links,
    })
}

/// Labels the observed stream, returning the labels and the thresholds
/// that were in force, so forecasts can be labelled against the same ones.
pub fn generate_ground_truth(
    calibration: &Calibration,
    observed: &Scores,
    horizon: usize,
    exec: ExecMode,
) -> Result<(IncidentLabels, Thresholds)> {
    let th = calibration.thresholds(observed, exec)?;
    Ok((label(observed, &th, horizon)?, th))
}

//! Train/test split, holdout training, forecast sweeps and the detection
//! run that turns forecasts into predicted incident labels.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::FeatureSeries;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::incident::{
    forecast_scores, generate_ground_truth, label, true_scores, BaselineTable, Calibration,
    IncidentLabels, PotConfig,
};
use crate::model::{RadNet, RadNetConfig};
use crate::parallel::ExecMode;
use crate::training::{split_folds, train, TrainConfig, TrainReport};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

pub const REPORT_CSV_HEADER: &str =
    "timestep,link_id,feature,baseline,truth,prediction,score,threshold,label";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    /// Leading share of the series used for training, baselines and
    /// threshold calibration.
    pub train_fraction: f64,
    pub pot: PotConfig,
    /// Clock tolerance of baseline keys; defaults to one interval.
    pub baseline_tolerance: Option<u32>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            pot: PotConfig::default(),
            baseline_tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

/// Chronological split into a leading training part and trailing test part.
pub fn chrono_split(len: usize, train_fraction: f64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let cut = (len as f64 * train_fraction).round() as usize;
    if cut == 0 || cut >= len {
        return Err(Error::arg(format!(
            "{len} steps leave an empty train or test part"
        )));
    }
    Ok(Split {
        train: 0..cut,
        test: cut..len,
    })
}

/// Trains on the leading `train_len` steps with the last of `cfg.folds`
/// contiguous blocks held out for validation and early stopping.
pub fn fit_holdout(
    config: &RadNetConfig,
    series: &FeatureSeries,
    graph: &RoadGraph,
    train_len: usize,
    cfg: &TrainConfig,
) -> Result<(RadNet, TrainReport)> {
    cfg.validate()?;
    let part = series.slice(0..train_len)?;
    let reach = config.horizon * cfg.rollout_steps;
    let folds = split_folds(part.len(), cfg.folds, config.window, reach)?;
    let fold = folds.last().expect("at least two folds");
    let mut model = RadNet::new(config.clone())?;
    let report = train(
        &mut model,
        &part,
        graph,
        &fold.train_samples,
        &fold.validation_samples,
        cfg,
    )?;
    Ok((model, report))
}

/// Forecasts for each target timestep from the window ending `H` steps
/// earlier, in original units.
pub fn forecast_sweep(
    model: &RadNet,
    series: &FeatureSeries,
    graph: &RoadGraph,
    targets: &[usize],
    exec: ExecMode,
) -> Result<Vec<Tensor>> {
    let h = model.config.horizon;
    if let Some(&t) = targets.iter().find(|&&t| t < h || t >= series.len()) {
        return Err(Error::arg(format!(
            "target {t} needs a source at least {h} steps earlier inside a series of {}",
            series.len()
        )));
    }
    exec.map(targets, |&t| {
        model.predict(series, graph, t - h).map(|f| f.prediction)
    })
    .into_iter()
    .collect()
}

/// Everything a detection run produced for one horizon.
#[derive(Debug)]
pub struct Detection {
    pub horizon: usize,
    pub split: Split,
    pub baseline: BaselineTable,
    pub calibration: Calibration,
    pub forecasts: Vec<Tensor>,
    pub truth: IncidentLabels,
    pub predicted: IncidentLabels,
    /// Mean squared forecast error per cell over the test targets.
    pub forecast_mse: f64,
}

/// Baselines and thresholds come from the training part only; labels are
/// produced for every test target the model can forecast.
pub fn detect(
    model: &RadNet,
    series: &FeatureSeries,
    graph: &RoadGraph,
    cfg: &DetectConfig,
    exec: ExecMode,
) -> Result<Detection> {
    let split = chrono_split(series.len(), cfg.train_fraction)?;
    let tolerance = cfg
        .baseline_tolerance
        .unwrap_or(series.delta_seconds as u32);
    let baseline = BaselineTable::build_with_tolerance(series, split.train.clone(), tolerance)?;

    let cal_steps: Vec<usize> = split.train.clone().collect();
    let cal_scores = true_scores(&baseline, series, &cal_steps, exec)?;
    let calibration = Calibration::fit(&cal_scores, &cfg.pot, exec)?;

    let h = model.config.horizon;
    let first = split.test.start.max(model.config.window - 1 + h);
    let targets: Vec<usize> = (first..split.test.end).collect();
    if targets.is_empty() {
        return Err(Error::arg("test part is too short to forecast"));
    }
    let forecasts = forecast_sweep(model, series, graph, &targets, exec)?;
    let observed = true_scores(&baseline, series, &targets, exec)?;
    let (truth, thresholds) = generate_ground_truth(&calibration, &observed, h, exec)?;
    let predicted_scores = forecast_scores(&baseline, series, &targets, &forecasts, exec)?;
    let predicted = label(&predicted_scores, &thresholds, h)?;

    let sq: f64 = targets
        .iter()
        .zip(&forecasts)
        .map(|(&t, f)| {
            f.data()
                .iter()
                .zip(series.frame_slice(t))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    let forecast_mse = sq / (targets.len() * series.n_nodes() * series.n_features()) as f64;
    if baseline.fallbacks() > 0 {
        log::warn!(
            "{} baseline lookups fell back to a nearby slot",
            baseline.fallbacks()
        );
    }
    Ok(Detection {
        horizon: h,
        split,
        baseline,
        calibration,
        forecasts,
        truth,
        predicted,
        forecast_mse,
    })
}

impl Detection {
    /// Per-link, per-feature rows for plotting: baseline, observed value,
    /// forecast, and the link's score, threshold and predicted label.
    pub fn write_report_csv(&self, series: &FeatureSeries, mut w: impl Write) -> Result<()> {
        writeln!(w, "{REPORT_CSV_HEADER}")?;
        let d = series.n_features();
        for (i, &t) in self.predicted.timesteps.iter().enumerate() {
            let base = self.baseline.at(series, t);
            let obs = series.frame_slice(t);
            let pred = self.forecasts[i].data();
            for (l, s) in self.predicted.links.iter().enumerate() {
                for f in 0..d {
                    let k = l * d + f;
                    writeln!(
                        w,
                        "{t},{l},{},{},{},{},{},{},{}",
                        series.feature_names[f],
                        base[k],
                        obs[k],
                        pred[k],
                        s.scores[i],
                        s.thresholds[i],
                        u8::from(s.labels[i])
                    )?;
                }
            }
        }
        Ok(())
    }
}

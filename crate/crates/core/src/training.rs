//! Contiguous cross-validation folds, early stopping and the AdamW training
//! loop.

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSeries, Normalizer};
use crate::engine::{AdamW, AdamWConfig, Gradients, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::model::{
    build_window, loss, RadNet, RadNetConfig, TeacherForcing, DEFAULT_TEACHER_FORCING,
};
use crate::parallel::ExecMode;

pub const LOSS_CSV_HEADER: &str = "epoch,train_loss,val_loss";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub batch: usize,
    pub seed: u64,
    /// Single-step forecasts chained per sample; above 1 the model is
    /// trained autoregressively with teacher forcing.
    pub rollout_steps: usize,
    pub teacher_forcing: f64,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-5,
            max_epochs: 100,
            patience: 10,
            folds: 5,
            batch: 32,
            seed: 0,
            rollout_steps: 1,
            teacher_forcing: DEFAULT_TEACHER_FORCING,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(self.lr > 0.0) {
            return Err(Error::arg(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.patience == 0 {
            return Err(Error::arg("patience must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::arg("need at least 2 folds"));
        }
        if self.batch == 0 || self.max_epochs == 0 || self.rollout_steps == 0 {
            return Err(Error::arg(
                "batch, max_epochs and rollout_steps must be at least 1",
            ));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One validation block with the source timesteps usable on either side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub validation: Range<usize>,
    pub train_samples: Vec<usize>,
    pub validation_samples: Vec<usize>,
}

/// Timesteps read by the sample with source `t`: the window plus target.
pub fn sample_span(t: usize, window: usize, reach: usize) -> Range<usize> {
    (t + 1).saturating_sub(window)..t + reach + 1
}

/// Splits `0..len` into `folds` contiguous validation blocks. A training
/// sample never reads a validation timestep; a validation sample reads
/// only timesteps of its own block. `reach` is how far past the source the
/// target lies.
pub fn split_folds(len: usize, folds: usize, window: usize, reach: usize) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::arg("need at least 2 folds"));
    }
    if len < folds * (window + reach) {
        return Err(Error::arg(format!(
            "series of {len} steps is too short for {folds} folds with window {window} and horizon {reach}"
        )));
    }
    let bounds: Vec<usize> = (0..=folds).map(|i| i * len / folds).collect();
    let sources = 0..len - reach;
    Ok((0..folds)
        .map(|i| {
            let validation = bounds[i]..bounds[i + 1];
            let inside = |r: &Range<usize>| r.start >= validation.start && r.end <= validation.end;
            let disjoint =
                |r: &Range<usize>| r.end <= validation.start || r.start >= validation.end;
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for t in sources.clone() {
                let span = sample_span(t, window, reach);
                if inside(&span) {
                    val.push(t);
                } else if disjoint(&span) {
                    train.push(t);
                }
            }
            Fold {
                index: i,
                validation,
                train_samples: train,
                validation_samples: val,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has not improved for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
}

pub fn write_loss_csv(history: &[EpochLoss], mut w: impl Write) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for e in history {
        writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
    }
    Ok(())
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples whose whole span lies in `range`.
pub fn samples_within(range: Range<usize>, window: usize, reach: usize) -> Vec<usize> {
    range
        .clone()
        .filter(|&t| {
            let s = sample_span(t, window, reach);
            s.start >= range.start && s.end <= range.end
        })
        .collect()
}

struct Trainer<'a> {
    model: &'a RadNet,
    series: &'a FeatureSeries,
    graph: &'a RoadGraph,
    cfg: &'a TrainConfig,
}

impl Trainer<'_> {
    fn reach(&self) -> usize {
        self.model.config.horizon * self.cfg.rollout_steps
    }

    /// Loss of one sample; with `dropout_seed` the tape runs in training mode
    /// and gradients are returned.
    fn sample(
        &self,
        store: &ParamStore,
        t: usize,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Option<Gradients>)> {
        let c = &self.model.config;
        let mut tape = match dropout_seed {
            Some(s) => Tape::training(s),
            None => Tape::new(),
        };
        let window = tape.constant(build_window(self.series, t, c.window)?);
        let steps = self.cfg.rollout_steps;
        let total = if steps == 1 {
            let out = self
                .model
                .forward_on(&mut tape, store, window, self.graph)?;
            let truth = tape.constant(self.series.frame(t + c.horizon)?);
            loss(&mut tape, out.prediction, truth)?
        } else {
            let mut forcing = TeacherForcing::new(
                self.cfg.teacher_forcing,
                mix(dropout_seed.unwrap_or(0), t as u64, 7),
            )?;
            let training = dropout_seed.is_some();
            let series = self.series;
            let preds = self.model.rollout_on(
                &mut tape,
                store,
                window,
                self.graph,
                steps,
                |step, tape| {
                    if training && forcing.draw() {
                        series.frame(t + step + 1).ok().map(|f| tape.constant(f))
                    } else {
                        None
                    }
                },
            )?;
            let mut acc = None;
            for (i, p) in preds.into_iter().enumerate() {
                let truth = tape.constant(self.series.frame(t + i + 1)?);
                let l = loss(&mut tape, p, truth)?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
            }
            acc.expect("rollout_steps >= 1")
        };
        let value = tape.value(total).item();
        if dropout_seed.is_none() || !value.is_finite() {
            return Ok((value, None));
        }
        tape.backward(total)?;
        Ok((value, Some(tape.param_grads(store))))
    }

    fn mean_loss(&self, store: &ParamStore, samples: &[usize]) -> Result<f64> {
        let losses = self
            .cfg
            .exec
            .map(samples, |&t| self.sample(store, t, None).map(|(l, _)| l));
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / samples.len().max(1) as f64)
    }
}

/// Trains `model` in place on the given source timesteps of the raw series
/// and leaves it holding the best-validation parameters.
pub fn train(
    model: &mut RadNet,
    series: &FeatureSeries,
    graph: &RoadGraph,
    train_samples: &[usize],
    validation_samples: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.rollout_steps > 1 && model.config.horizon != 1 {
        return Err(Error::arg(
            "autoregressive training needs a single-step model",
        ));
    }
    if train_samples.is_empty() || validation_samples.is_empty() {
        return Err(Error::arg(
            "training and validation sample sets must be non-empty",
        ));
    }
    let (k, reach) = (
        model.config.window,
        model.config.horizon * cfg.rollout_steps,
    );
    if let Some(&t) = train_samples
        .iter()
        .chain(validation_samples)
        .find(|&&t| t + reach >= series.len())
    {
        return Err(Error::Index {
            index: t + reach,
            len: series.len(),
        });
    }
    let steps: BTreeSet<usize> = train_samples
        .iter()
        .flat_map(|&t| sample_span(t, k, reach))
        .collect();
    model.normalizer = Normalizer::fit_steps(series, steps.iter().copied())?;
    let normalized = model.normalizer.apply(series);

    let mut store = model.params.clone();
    let mut best = store.clone();
    let mut opt = AdamW::new(cfg.adamw(), &store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_samples.to_vec();
    let mut history = Vec::new();
    let mut stopped = cfg.max_epochs;
    let trainer = Trainer {
        model,
        series: &normalized,
        graph,
        cfg,
    };
    debug_assert_eq!(trainer.reach(), reach);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let results = cfg.exec.map(batch, |&t| {
                trainer.sample(&store, t, Some(mix(cfg.seed, epoch as u64, t as u64)))
            });
            let mut grads = Gradients::zeros_like(&store);
            for (r, &t) in results.into_iter().zip(batch) {
                let non_finite = Error::NonFiniteLoss {
                    step: opt.step_count() as usize,
                    lr: cfg.lr,
                    window: t,
                };
                let (l, g) = match r {
                    Err(Error::Numeric { .. }) => return Err(non_finite),
                    other => other?,
                };
                if !l.is_finite() {
                    return Err(non_finite);
                }
                epoch_loss += l;
                grads.accumulate(&g.expect("training sample returns gradients"));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut store, &grads)?;
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = trainer.mean_loss(&store, validation_samples)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: opt.step_count() as usize,
                lr: cfg.lr,
                window: validation_samples[0],
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = store.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped = epoch;
                break;
            }
        }
    }
    model.params = best;
    let (best_epoch, best_val_loss) = stopper.best();
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss,
        stopped_epoch: stopped,
    })
}

/// Trains a fresh model per fold; the result is in fold order.
pub fn cross_validate(
    config: &RadNetConfig,
    series: &FeatureSeries,
    graph: &RoadGraph,
    cfg: &TrainConfig,
) -> Result<Vec<(RadNet, TrainReport)>> {
    cfg.validate()?;
    let reach = config.horizon * cfg.rollout_steps;
    let folds = split_folds(series.len(), cfg.folds, config.window, reach)?;
    let runs = cfg.exec.map(&folds, |fold| {
        let mut model = RadNet::new(config.clone())?;
        let report = train(
            &mut model,
            series,
            graph,
            &fold.train_samples,
            &fold.validation_samples,
            cfg,
        )?;
        Ok((model, report))
    });
    runs.into_iter().collect()
}

/// Mean eval-mode loss of `model` over samples, in normalised units.
pub fn evaluate_loss(
    model: &RadNet,
    series: &FeatureSeries,
    graph: &RoadGraph,
    samples: &[usize],
    exec: ExecMode,
) -> Result<f64> {
    let cfg = TrainConfig {
        exec,
        ..TrainConfig::default()
    };
    let normalized = model.normalizer.apply(series);
    let trainer = Trainer {
        model,
        series: &normalized,
        graph,
        cfg: &cfg,
    };
    trainer.mean_loss(&model.params, samples)
}

/// Mean squared error per cell of forecasts in original units.
pub fn forecast_mse(
    model: &RadNet,
    series: &FeatureSeries,
    graph: &RoadGraph,
    samples: &[usize],
    exec: ExecMode,
) -> Result<f64> {
    let h = model.config.horizon;
    let errs = exec.map(samples, |&t| -> Result<f64> {
        let f = model.predict(series, graph, t)?;
        let truth: Tensor = series.frame(t + h)?;
        Ok(f.prediction
            .data()
            .iter()
            .zip(truth.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum())
    });
    let mut sum = 0.0;
    for e in errs {
        sum += e?;
    }
    let cells = (samples.len() * series.n_nodes() * series.n_features()).max(1);
    Ok(sum / cells as f64)
}

#[cfg(test)]
mod tests;

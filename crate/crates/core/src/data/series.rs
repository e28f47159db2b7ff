use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// `T` feature matrices of shape `N×D` sampled every `delta_seconds`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    t: usize,
    n: usize,
    d: usize,
    data: Vec<f64>,
    pub start_epoch: i64,
    pub delta_seconds: u64,
    pub feature_names: Vec<String>,
}

impl FeatureSeries {
    pub fn new(
        shape: (usize, usize, usize),
        data: Vec<f64>,
        start_epoch: i64,
        delta_seconds: u64,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let (t, n, d) = shape;
        if data.len() != t * n * d {
            return Err(Error::Format(format!(
                "series of shape {t}x{n}x{d} needs {} values, got {}",
                t * n * d,
                data.len()
            )));
        }
        if delta_seconds == 0 {
            return Err(Error::arg("interval duration must be positive"));
        }
        if feature_names.len() != d {
            return Err(Error::Format(format!(
                "{} feature names for {d} features",
                feature_names.len()
            )));
        }
        Ok(FeatureSeries {
            t,
            n,
            d,
            data,
            start_epoch,
            delta_seconds,
            feature_names,
        })
    }

    /// Names `f0, f1, ...`.
    pub fn default_names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("f{i}")).collect()
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn value(&self, t: usize, node: usize, feature: usize) -> f64 {
        self.data[(t * self.n + node) * self.d + feature]
    }

    pub fn frame_slice(&self, t: usize) -> &[f64] {
        let w = self.n * self.d;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn frame(&self, t: usize) -> Result<Tensor> {
        if t >= self.t {
            return Err(Error::Index {
                index: t,
                len: self.t,
            });
        }
        Tensor::new(vec![self.n, self.d], self.frame_slice(t).to_vec())
    }

    /// Timesteps `range` as a new series with the start time shifted.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.t {
            return Err(Error::Index {
                index: range.end,
                len: self.t,
            });
        }
        let w = self.n * self.d;
        Ok(FeatureSeries {
            t: range.len(),
            n: self.n,
            d: self.d,
            data: self.data[range.start * w..range.end * w].to_vec(),
            start_epoch: self.start_epoch + (range.start as u64 * self.delta_seconds) as i64,
            delta_seconds: self.delta_seconds,
            feature_names: self.feature_names.clone(),
        })
    }

    pub fn epoch(&self, t: usize) -> i64 {
        self.start_epoch + (t as u64 * self.delta_seconds) as i64
    }

    /// Day of week of timestep `t`, Monday = 0.
    pub fn weekday(&self, t: usize) -> u8 {
        weekday_of(self.epoch(t))
    }

    /// Seconds since midnight of timestep `t`.
    pub fn clock(&self, t: usize) -> u32 {
        self.epoch(t).rem_euclid(SECONDS_PER_DAY) as u32
    }

    pub fn steps_per_day(&self) -> usize {
        (SECONDS_PER_DAY as u64 / self.delta_seconds) as usize
    }
}

pub fn weekday_of(epoch: i64) -> u8 {
    // 1970-01-01 was a Thursday
    (epoch.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as u8
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(d: usize) -> Self {
        Normalizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Fits on timesteps `range` of `series`. Constant features get unit scale.
    pub fn fit(series: &FeatureSeries, range: std::ops::Range<usize>) -> Result<Self> {
        Self::fit_steps(series, range)
    }

    /// Fits on an arbitrary set of timesteps.
    pub fn fit_steps(
        series: &FeatureSeries,
        steps: impl IntoIterator<Item = usize> + Clone,
    ) -> Result<Self> {
        let d = series.n_features();
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for t in steps.clone() {
            if t >= series.len() {
                return Err(Error::Index {
                    index: t,
                    len: series.len(),
                });
            }
            for (i, v) in series.frame_slice(t).iter().enumerate() {
                mean[i % d] += v;
            }
            count += series.n_nodes();
        }
        if count == 0 {
            return Err(Error::arg("cannot fit normaliser on zero timesteps"));
        }
        let count = count as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for t in steps {
            for (i, v) in series.frame_slice(t).iter().enumerate() {
                var[i % d] += (v - mean[i % d]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply_slice(&self, values: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std[i % d];
        }
    }

    pub fn invert_slice(&self, values: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
    }

    pub fn apply(&self, series: &FeatureSeries) -> FeatureSeries {
        let mut out = series.clone();
        self.apply_slice(out.data_mut());
        out
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        self.invert_slice(out.data_mut());
        out
    }
}

//! Peak-over-threshold calibration with a Generalised Pareto tail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RISK: f64 = 1e-3;
pub const DEFAULT_REFIT_EVERY: usize = 500;
pub const MIN_EXCESSES: usize = 50;
const GAMMA_RANGE: (f64, f64) = (-0.5, 1.0);
const GRID_POINTS: usize = 61;
const EXP_LIMIT: f64 = 1e-8;
const ZERO_EXCESS_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    MaximumLikelihood,
    Moments,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub gamma: f64,
    pub sigma: f64,
    pub method: FitMethod,
}

/// Empirical percentile (0–100) with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::arg(format!("percentile {pct} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Profile log-likelihood of unit-mean excesses at shape `gamma`, with the
/// scale at its conditional optimum. Returns `(loglik, sigma)`.
fn profile(y: &[f64], gamma: f64) -> Option<(f64, f64)> {
    let n = y.len() as f64;
    let sigma = if gamma.abs() < EXP_LIMIT {
        y.iter().sum::<f64>() / n
    } else {
        solve_scale(y, gamma)?
    };
    let ll = if gamma.abs() < EXP_LIMIT {
        -n * sigma.ln() - y.iter().sum::<f64>() / sigma
    } else {
        let mut acc = 0.0;
        for &v in y {
            let z = 1.0 + gamma * v / sigma;
            if z <= 0.0 {
                return None;
            }
            acc += z.ln();
        }
        -n * sigma.ln() - (1.0 + 1.0 / gamma) * acc
    };
    ll.is_finite().then_some((ll, sigma))
}

/// Root of `(1+γ)·mean(y/(σ+γy)) = 1`, which is decreasing in `σ`.
/// Newton steps safeguarded by a shrinking bracket.
fn solve_scale(y: &[f64], gamma: f64) -> Option<f64> {
    let n = y.len() as f64;
    let eval = |s: f64| {
        let (mut f, mut df) = (0.0, 0.0);
        for &v in y {
            let d = s + gamma * v;
            f += v / d;
            df -= v / (d * d);
        }
        ((1.0 + gamma) * f / n - 1.0, (1.0 + gamma) * df / n)
    };
    let ymax = y.iter().copied().fold(0.0, f64::max);
    let mut lo = if gamma < 0.0 { -gamma * ymax } else { 0.0 };
    let mut hi = lo.max(1.0);
    while eval(hi).0 > 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return None;
        }
    }
    let mut s = (1.0 - gamma).clamp(lo, hi);
    if s <= lo || s >= hi {
        s = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let (f, df) = eval(s);
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let mut next = s - f / df;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-14 * s || hi - lo <= 1e-14 * hi {
            s = next;
            break;
        }
        s = next;
    }
    (s > 0.0 && s.is_finite()).then_some(s)
}

fn moments(y: &[f64]) -> GpdFit {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let v = y.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let (gamma, sigma) = if v > 0.0 {
        (0.5 * (1.0 - m * m / v), 0.5 * m * (m * m / v + 1.0))
    } else {
        (0.0, m)
    };
    GpdFit {
        gamma,
        sigma: sigma.max(f64::MIN_POSITIVE),
        method: FitMethod::Moments,
    }
}

/// Maximum-likelihood GPD fit of positive excesses: profile grid over the
/// shape then golden-section refinement. Falls back to moments when the
/// likelihood is not finite anywhere on the grid.
pub fn fit_gpd(excesses: &[f64]) -> Result<GpdFit> {
    if excesses.is_empty() {
        return Err(Error::arg("GPD fit needs at least one excess"));
    }
    if excesses.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::numeric(
            "fit_gpd",
            "excesses must be finite and non-negative",
        ));
    }
    let scale = excesses.iter().sum::<f64>() / excesses.len() as f64;
    if scale == 0.0 {
        return Ok(GpdFit {
            gamma: 0.0,
            sigma: f64::MIN_POSITIVE,
            method: FitMethod::Moments,
        });
    }
    // fit unit-mean data so the result scales exactly with the input
    let y: Vec<f64> = excesses.iter().map(|v| v / scale).collect();
    let (a, b) = GAMMA_RANGE;
    let step = (b - a) / (GRID_POINTS - 1) as f64;
    let ll = |g: f64| profile(&y, g).map(|(l, _)| l).unwrap_or(f64::NEG_INFINITY);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for i in 0..GRID_POINTS {
        let l = ll(a + step * i as f64);
        if l > best.0 {
            best = (l, i);
        }
    }
    if !best.0.is_finite() {
        log::warn!("GPD likelihood not finite; using method of moments");
        let m = moments(&y);
        return Ok(GpdFit {
            sigma: m.sigma * scale,
            ..m
        });
    }
    let centre = a + step * best.1 as f64;
    let (mut lo, mut hi) = ((centre - step).max(a), (centre + step).min(b));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (ll(x1), ll(x2));
    for _ in 0..60 {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = ll(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = ll(x2);
        }
    }
    let mut gamma = 0.5 * (lo + hi);
    if ll(gamma) < best.0 {
        gamma = centre;
    }
    let (_, sigma) = profile(&y, gamma).expect("finite at refined optimum");
    Ok(GpdFit {
        gamma,
        sigma: sigma * scale,
        method: FitMethod::MaximumLikelihood,
    })
}

/// Tail quantile at risk `q` given `n` observations of which `n_excess`
/// exceeded `u`. Never below `u`.
pub fn pot_quantile(u: f64, fit: &GpdFit, risk: f64, n: usize, n_excess: usize) -> f64 {
    let r = risk * n as f64 / n_excess as f64;
    let phi = if fit.gamma.abs() < EXP_LIMIT {
        u - fit.sigma * r.ln()
    } else {
        u + fit.sigma / fit.gamma * (r.powf(-fit.gamma) - 1.0)
    };
    phi.max(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PotConfig {
    /// Percentile (0–100) of calibration scores used as the initial threshold.
    pub percentile: f64,
    pub risk: f64,
    pub dynamic: bool,
    pub refit_every: usize,
}

impl Default for PotConfig {
    fn default() -> Self {
        PotConfig {
            percentile: 99.0,
            risk: DEFAULT_RISK,
            dynamic: true,
            refit_every: DEFAULT_REFIT_EVERY,
        }
    }
}

impl PotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..100.0).contains(&self.percentile) {
            return Err(Error::arg(format!(
                "percentile {} outside [0, 100)",
                self.percentile
            )));
        }
        if !(self.risk > 0.0 && self.risk < 1.0) {
            return Err(Error::arg(format!("risk {} outside (0, 1)", self.risk)));
        }
        if self.refit_every == 0 {
            return Err(Error::arg("refit cadence must be at least 1"));
        }
        Ok(())
    }
}

/// Initial percentile and per-horizon decrement for a dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentilePreset {
    pub base: f64,
    pub delta: f64,
}

impl PercentilePreset {
    pub const RADSET: PercentilePreset = PercentilePreset {
        base: 99.0,
        delta: 0.5,
    };
    pub const METR_LA: PercentilePreset = PercentilePreset {
        base: 50.0,
        delta: 2.5,
    };
    pub const PEMS: PercentilePreset = PercentilePreset {
        base: 45.0,
        delta: 2.5,
    };

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "radset" => Some(Self::RADSET),
            "metrla" => Some(Self::METR_LA),
            "pems" | "pemsbay" => Some(Self::PEMS),
            _ => None,
        }
    }

    /// Percentile for the `step`-th horizon (0 = shortest).
    pub fn percentile(&self, step: usize) -> f64 {
        (self.base - self.delta * step as f64).max(0.0)
    }
}

/// Streaming threshold: initial threshold, tail fit, counts and the
/// current value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub initial: f64,
    pub fit: Option<GpdFit>,
    pub risk: f64,
    pub n_excess: usize,
    pub n_total: usize,
    pub phi: f64,
    pub refit_every: usize,
    #[serde(skip)]
    excesses: Vec<f64>,
    #[serde(skip)]
    pending: usize,
}

impl ThresholdState {
    /// Calibrates on `scores`.
    pub fn fit(scores: &[f64], cfg: &PotConfig) -> Result<Self> {
        cfg.validate()?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("pot_fit", "non-finite calibration score"));
        }
        let u = percentile(scores, cfg.percentile)?;
        let excesses: Vec<f64> = scores.iter().filter(|&&s| s > u).map(|s| s - u).collect();
        let mut state = ThresholdState {
            initial: u,
            fit: None,
            risk: cfg.risk,
            n_excess: excesses.len(),
            n_total: scores.len(),
            phi: u,
            refit_every: cfg.refit_every,
            excesses,
            pending: 0,
        };
        if state.n_excess == 0 {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            state.phi = max + ZERO_EXCESS_MARGIN * max.abs().max(1.0);
            log::warn!("no calibration score exceeds the initial threshold {u}; threshold set just above the maximum");
            return Ok(state);
        }
        if state.n_excess < MIN_EXCESSES {
            log::warn!("only {} excesses for the tail fit", state.n_excess);
        }
        state.refit()?;
        Ok(state)
    }

    fn refit(&mut self) -> Result<()> {
        let fit = fit_gpd(&self.excesses)?;
        self.phi = pot_quantile(self.initial, &fit, self.risk, self.n_total, self.n_excess);
        self.fit = Some(fit);
        self.pending = 0;
        Ok(())
    }

    /// Labels `score` against the current threshold, then folds unflagged
    /// scores into the tail statistics, refitting every `refit_every` new
    /// excesses. Returns `(threshold used, label)`.
    pub fn observe(&mut self, score: f64) -> Result<(f64, bool)> {
        let phi = self.phi;
        let flagged = score >= phi;
        if !flagged {
            self.n_total += 1;
            if score > self.initial {
                self.excesses.push(score - self.initial);
                self.n_excess += 1;
                self.pending += 1;
                if self.pending >= self.refit_every {
                    self.refit()?;
                }
            }
        }
        Ok((phi, flagged))
    }

    /// Threshold sequence for a stream; static mode holds `phi` fixed.
    pub fn thresholds(&mut self, scores: &[f64], dynamic: bool) -> Result<Vec<f64>> {
        if !dynamic {
            return Ok(vec![self.phi; scores.len()]);
        }
        scores
            .iter()
            .map(|&s| self.observe(s).map(|(p, _)| p))
            .collect()
    }
}

#[cfg(test)]
mod tests;

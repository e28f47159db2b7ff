//! Periodic synthetic traffic with injected incidents.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::series::{FeatureSeries, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::graph::RoadGraph;

/// Monday 1970-01-05 00:00 UTC.
pub const DEFAULT_START_EPOCH: i64 = 4 * SECONDS_PER_DAY;

/// Features that rise during an incident; everything else drops.
const RISING: [&str; 6] = ["del", "cong", "cong_raw", "occ", "ql", "queue"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub start: usize,
    pub link: usize,
    pub duration: usize,
    /// Relative change, e.g. 0.5 halves speed and flow.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncidentSpec {
    /// Randomly placed events.
    pub count: usize,
    pub depth: f64,
    pub duration: usize,
    /// Random events start at or after this timestep.
    pub earliest: usize,
    /// Events placed as given, in addition to the random ones.
    pub explicit: Vec<Incident>,
}

impl Default for IncidentSpec {
    fn default() -> Self {
        IncidentSpec {
            count: 0,
            depth: 0.5,
            duration: 6,
            earliest: 0,
            explicit: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub days: usize,
    pub delta_seconds: u64,
    pub n_features: usize,
    pub start_epoch: i64,
    pub level: f64,
    /// Daily swing as a fraction of the level.
    pub daily_amplitude: f64,
    /// Weekly swing as a fraction of the level.
    pub weekly_amplitude: f64,
    /// Noise standard deviation as a fraction of the level.
    pub noise: f64,
    /// Lag-one autocorrelation of the noise; deviations persist over time.
    pub noise_memory: f64,
    /// Extra random edges on top of the ring.
    pub chords: usize,
    pub incidents: IncidentSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 4,
            days: 14,
            delta_seconds: 300,
            n_features: 1,
            start_epoch: DEFAULT_START_EPOCH,
            level: 60.0,
            daily_amplitude: 0.25,
            weekly_amplitude: 0.05,
            noise: 0.05,
            noise_memory: 0.9,
            chords: 1,
            incidents: IncidentSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub series: FeatureSeries,
    pub graph: RoadGraph,
    /// `T × N`, set where an incident was injected.
    pub mask: Vec<bool>,
    /// Events as actually injected, after clipping.
    pub incidents: Vec<Incident>,
}

impl SynthData {
    pub fn is_incident(&self, t: usize, link: usize) -> bool {
        self.mask[t * self.series.n_nodes() + link]
    }
}

/// Feature names for `d` generated features.
pub fn synth_feature_names(d: usize) -> Vec<String> {
    match d {
        1 => vec!["speed".to_string()],
        7 => super::io::RADSET_FEATURES
            .iter()
            .map(|s| s.to_string())
            .collect(),
        _ => FeatureSeries::default_names(d),
    }
}

/// Ring `0 – 1 – … – n-1 – 0` plus `chords` random non-ring edges.
pub fn ring_with_chords(n: usize, chords: usize, rng: &mut impl Rng) -> Result<RoadGraph> {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let ring = RoadGraph::new(n, edges.iter().copied())?;
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|&(a, b)| !ring.has_edge(a, b))
        .collect();
    if chords > candidates.len() {
        log::warn!(
            "only {} chords fit a {n}-node ring, {chords} requested",
            candidates.len()
        );
    }
    for _ in 0..chords.min(candidates.len()) {
        edges.push(candidates.swap_remove(rng.random_range(0..candidates.len())));
    }
    RoadGraph::new(n, edges)
}

pub fn synth_traffic(cfg: &SynthConfig) -> Result<SynthData> {
    let (n, d) = (cfg.n_nodes, cfg.n_features);
    if n == 0 || d == 0 || cfg.delta_seconds == 0 {
        return Err(Error::arg(
            "synthetic data needs nodes, features and a positive interval",
        ));
    }
    if cfg.days < 2 {
        return Err(Error::arg(format!(
            "synthetic data needs at least 2 days, got {}",
            cfg.days
        )));
    }
    if !(SECONDS_PER_DAY as u64).is_multiple_of(cfg.delta_seconds) {
        return Err(Error::arg("interval must divide a day"));
    }
    if !(0.0..1.0).contains(&cfg.noise_memory) {
        return Err(Error::arg(format!(
            "noise memory must lie in [0, 1), got {}",
            cfg.noise_memory
        )));
    }
    if cfg.days < 8 {
        log::warn!(
            "{} days give weekday baseline slots a single sample",
            cfg.days
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graph = ring_with_chords(n, cfg.chords, &mut rng)?;
    let names = synth_feature_names(d);

    // per (node, feature) level and daily phase
    let scale: Vec<f64> = (0..n * d)
        .map(|_| cfg.level * rng.random_range(0.8..1.2))
        .collect();
    let phase: Vec<f64> = (0..n * d).map(|_| rng.random_range(-0.3..0.3)).collect();

    let spd = (SECONDS_PER_DAY as u64 / cfg.delta_seconds) as usize;
    let t_len = cfg.days * spd;
    let mut series = FeatureSeries::new(
        (t_len, n, d),
        vec![0.0; t_len * n * d],
        cfg.start_epoch,
        cfg.delta_seconds,
        names,
    )?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // stationary AR(1) with unit variance
    let rho = cfg.noise_memory;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut raw: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    for t in 0..t_len {
        let day = series.clock(t) as f64 / SECONDS_PER_DAY as f64;
        let week = (series.weekday(t) as f64 + day) / 7.0;
        if t > 0 {
            for v in raw.iter_mut() {
                *v = rho * *v + innovation * normal.sample(&mut rng);
            }
        }
        let frame = &mut series.data_mut()[t * n * d..(t + 1) * n * d];
        for i in 0..n {
            let nb = graph.neighbors(i);
            for f in 0..d {
                let k = i * d + f;
                let smoothed = nb.iter().map(|&j| raw[j * d + f]).sum::<f64>() / nb.len() as f64;
                frame[k] = scale[k]
                    * (1.0
                        + cfg.daily_amplitude * (TAU * day + phase[k]).sin()
                        + cfg.weekly_amplitude * (TAU * week).sin()
                        + cfg.noise * smoothed);
            }
        }
    }

    let incidents = place_incidents(&cfg.incidents, t_len, n, &mut rng)?;
    let mut mask = vec![false; t_len * n];
    let rising: Vec<bool> = series
        .feature_names
        .iter()
        .map(|s| RISING.contains(&s.as_str()))
        .collect();
    for inc in &incidents {
        for t in inc.start..inc.start + inc.duration {
            mask[t * n + inc.link] = true;
            for (f, &up) in rising.iter().enumerate() {
                let factor = if up { 1.0 + inc.depth } else { 1.0 - inc.depth };
                series.data_mut()[(t * n + inc.link) * d + f] *= factor;
            }
        }
    }
    Ok(SynthData {
        series,
        graph,
        mask,
        incidents,
    })
}

fn clip(inc: Incident, t_len: usize) -> Incident {
    if inc.start + inc.duration > t_len {
        log::warn!(
            "incident on link {} at t={} runs past the series end, clipped to {} steps",
            inc.link,
            inc.start,
            t_len - inc.start
        );
        Incident {
            duration: t_len - inc.start,
            ..inc
        }
    } else {
        inc
    }
}

fn overlaps(a: &Incident, b: &Incident) -> bool {
    a.link == b.link && a.start < b.start + b.duration && b.start < a.start + a.duration
}

// random events never overlap on the same link, so the mask counts them exactly
fn place_incidents(
    spec: &IncidentSpec,
    t_len: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Incident>> {
    let mut out = Vec::new();
    for &inc in &spec.explicit {
        if inc.link >= n || inc.start >= t_len {
            return Err(Error::arg(format!(
                "incident at t={} link {} lies outside {t_len} steps x {n} links",
                inc.start, inc.link
            )));
        }
        out.push(clip(inc, t_len));
    }
    if spec.count == 0 {
        return Ok(out);
    }
    if spec.duration == 0 || spec.earliest >= t_len {
        return Err(Error::arg(
            "random incidents need a positive duration and room to start",
        ));
    }
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.count {
        attempts += 1;
        if attempts > 1000 * spec.count {
            return Err(Error::arg(format!(
                "could not place {} non-overlapping incidents",
                spec.count
            )));
        }
        let cand = clip(
            Incident {
                start: rng.random_range(spec.earliest..t_len),
                link: rng.random_range(0..n),
                duration: spec.duration,
                depth: spec.depth,
            },
            t_len,
        );
        if out.iter().any(|o| overlaps(o, &cand)) {
            continue;
        }
        out.push(cand);
        placed += 1;
    }
    out.sort_by_key(|i| (i.start, i.link));
    Ok(out)
}

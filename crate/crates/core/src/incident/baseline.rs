use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::FeatureSeries;
use crate::error::{Error, Result};

/// Mean and contributor count for one (weekday, clock) key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Historical averages keyed by weekday and clock time. Each key averages
/// every fitted matrix on the same weekday whose clock differs by at most
/// `tolerance_seconds`.
#[derive(Debug)]
pub struct BaselineTable {
    pub n_nodes: usize,
    pub n_features: usize,
    pub tolerance_seconds: u32,
    entries: BTreeMap<(u8, u32), BaselineEntry>,
    fallbacks: AtomicUsize,
}

impl Clone for BaselineTable {
    fn clone(&self) -> Self {
        BaselineTable {
            n_nodes: self.n_nodes,
            n_features: self.n_features,
            tolerance_seconds: self.tolerance_seconds,
            entries: self.entries.clone(),
            fallbacks: AtomicUsize::new(self.fallbacks()),
        }
    }
}

impl BaselineTable {
    /// Builds with tolerance equal to the interval duration.
    pub fn build(series: &FeatureSeries, fit: Range<usize>) -> Result<Self> {
        Self::build_with_tolerance(series, fit, series.delta_seconds as u32)
    }

    pub fn build_with_tolerance(
        series: &FeatureSeries,
        fit: Range<usize>,
        tolerance_seconds: u32,
    ) -> Result<Self> {
        if fit.is_empty() || fit.end > series.len() {
            return Err(Error::arg(format!(
                "baseline fit range {fit:?} is empty or exceeds {} timesteps",
                series.len()
            )));
        }
        let width = series.n_nodes() * series.n_features();
        // exact-key sums first, then windowed sums over neighbouring clocks
        let mut groups: BTreeMap<(u8, u32), (Vec<f64>, usize)> = BTreeMap::new();
        for t in fit {
            let g = groups
                .entry((series.weekday(t), series.clock(t)))
                .or_insert_with(|| (vec![0.0; width], 0));
            for (s, v) in g.0.iter_mut().zip(series.frame_slice(t)) {
                *s += v;
            }
            g.1 += 1;
        }
        let entries = groups
            .keys()
            .map(|&(wd, c)| {
                let lo = c.saturating_sub(tolerance_seconds);
                let hi = c.saturating_add(tolerance_seconds);
                let mut sum = vec![0.0; width];
                let mut count = 0;
                for (_, (s, n)) in groups.range((wd, lo)..=(wd, hi)) {
                    for (a, b) in sum.iter_mut().zip(s) {
                        *a += b;
                    }
                    count += n;
                }
                let mean = sum.into_iter().map(|s| s / count as f64).collect();
                ((wd, c), BaselineEntry { mean, count })
            })
            .collect();
        Ok(BaselineTable {
            n_nodes: series.n_nodes(),
            n_features: series.n_features(),
            tolerance_seconds,
            entries,
            fallbacks: AtomicUsize::new(0),
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(u8, u32), &BaselineEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of lookups that had to fall back to a neighbouring key.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Mean matrix (flattened `N·D`) for a key. Unseen keys use the nearest
    /// clock on the same weekday, or the nearest clock on any weekday when
    /// that weekday was never observed.
    pub fn lookup(&self, weekday: u8, clock: u32) -> &[f64] {
        if let Some(e) = self.entries.get(&(weekday, clock)) {
            return &e.mean;
        }
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
        let same_day = nearest(
            self.entries.range((weekday, 0)..=(weekday, u32::MAX)),
            clock,
        );
        let entry = same_day
            .or_else(|| nearest(self.entries.iter(), clock))
            .expect("baseline table is never empty");
        log::warn!("no baseline for weekday {weekday} clock {clock}s; using nearest slot");
        &entry.mean
    }

    pub fn at(&self, series: &FeatureSeries, t: usize) -> &[f64] {
        self.lookup(series.weekday(t), series.clock(t))
    }
}

fn nearest<'a>(
    it: impl Iterator<Item = (&'a (u8, u32), &'a BaselineEntry)>,
    clock: u32,
) -> Option<&'a BaselineEntry> {
    it.min_by_key(|((_, c), _)| (c.abs_diff(clock), *c))
        .map(|(_, e)| e)
}

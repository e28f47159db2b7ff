//! Detection (precision, recall, F1) and diagnosis (HitRate@P%, NDCG@P%)
//! metrics, and the per-horizon report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::incident::IncidentLabels;

pub const DIAGNOSIS_PERCENTS: [u32; 2] = [100, 150];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Set when any denominator was zero.
    pub degenerate: bool,
}

pub fn prf1(pred: &[bool], truth: &[bool]) -> Result<Prf1> {
    if pred.len() != truth.len() {
        return Err(Error::arg(format!(
            "{} predicted labels for {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| {
        if b == 0 {
            None
        } else {
            Some(a as f64 / b as f64)
        }
    };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf1 {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        degenerate: p.is_none() || r.is_none() || precision + recall == 0.0,
    })
}

/// Link ids by descending score; ties go to the lower id.
pub fn rank_links(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// `⌈P/100 · n⌉`.
pub fn top_k(percent: u32, n_truth: usize) -> usize {
    (percent as usize * n_truth).div_ceil(100)
}

fn check(ranking: &[usize], truth: &BTreeSet<usize>) -> Result<()> {
    if ranking.is_empty() {
        return Err(Error::arg("empty ranking"));
    }
    if truth.is_empty() {
        return Err(Error::arg("diagnosis metrics need at least one true link"));
    }
    Ok(())
}

pub fn hitrate_at(ranking: &[usize], truth: &BTreeSet<usize>, percent: u32) -> Result<f64> {
    check(ranking, truth)?;
    let k = top_k(percent, truth.len()).min(ranking.len());
    let hits = ranking[..k].iter().filter(|l| truth.contains(l)).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn ndcg_at(ranking: &[usize], truth: &BTreeSet<usize>, percent: u32) -> Result<f64> {
    check(ranking, truth)?;
    let k = top_k(percent, truth.len()).min(ranking.len());
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranking[..k]
        .iter()
        .enumerate()
        .filter(|(_, l)| truth.contains(l))
        .map(|(i, _)| gain(i + 1))
        .sum();
    let ideal: f64 = (1..=k.min(truth.len())).map(gain).sum();
    Ok(dcg / ideal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizon: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub degenerate: bool,
    /// Keyed by P%.
    pub hitrate: BTreeMap<u32, f64>,
    pub ndcg: BTreeMap<u32, f64>,
    /// Timesteps with at least one truly flagged link.
    pub diagnosis_steps: usize,
    /// Micro-averaged detection over all (timestep, link) cells.
    pub link_level: Prf1,
    pub runtime_seconds: Option<f64>,
}

/// Predicted link scores at position `i` relative to each link's threshold,
/// so a link is flagged exactly when its key reaches 1.
pub fn exceedance(labels: &IncidentLabels, i: usize) -> Vec<f64> {
    labels
        .links
        .iter()
        .map(|s| {
            let (score, phi) = (s.scores[i], s.thresholds[i]);
            if phi > 0.0 {
                score / phi
            } else if score >= phi {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect()
}

/// Network-level detection from the network labels; diagnosis ranks links
/// by predicted exceedance at every timestep with a truly flagged link.
pub fn evaluate(pred: &IncidentLabels, truth: &IncidentLabels) -> Result<EvalReport> {
    if pred.timesteps != truth.timesteps || pred.n_links() != truth.n_links() {
        return Err(Error::arg(
            "predicted and true label streams are not aligned",
        ));
    }
    let det = prf1(&pred.network.labels, &truth.network.labels)?;
    let flat = |l: &IncidentLabels| -> Vec<bool> {
        l.links
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .collect()
    };
    let link_level = prf1(&flat(pred), &flat(truth))?;

    let mut hit_sum: BTreeMap<u32, f64> = BTreeMap::new();
    let mut ndcg_sum: BTreeMap<u32, f64> = BTreeMap::new();
    let mut steps = 0;
    for i in 0..truth.timesteps.len() {
        let true_links: BTreeSet<usize> = truth.flagged_links(i).into_iter().collect();
        if true_links.is_empty() {
            continue;
        }
        steps += 1;
        let ranking = rank_links(&exceedance(pred, i));
        for p in DIAGNOSIS_PERCENTS {
            *hit_sum.entry(p).or_default() += hitrate_at(&ranking, &true_links, p)?;
            *ndcg_sum.entry(p).or_default() += ndcg_at(&ranking, &true_links, p)?;
        }
    }
    let avg = |m: BTreeMap<u32, f64>| -> BTreeMap<u32, f64> {
        DIAGNOSIS_PERCENTS
            .iter()
            .map(|p| (*p, m.get(p).map_or(0.0, |s| s / steps as f64)))
            .collect()
    };
    Ok(EvalReport {
        horizon: truth.horizon,
        precision: det.precision,
        recall: det.recall,
        f1: det.f1,
        tp: det.tp,
        fp: det.fp,
        fn_: det.fn_,
        degenerate: det.degenerate,
        hitrate: avg(hit_sum),
        ndcg: avg(ndcg_sum),
        diagnosis_steps: steps,
        link_level,
        runtime_seconds: None,
    })
}

/// Aligned text table with one row per horizon.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "horizon", "P", "R", "F1", "H@1", "H@1.5", "N@1", "N@1.5"
    );
    for r in reports {
        let get = |m: &BTreeMap<u32, f64>, p| m.get(&p).copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{:>8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.horizon,
            r.precision,
            r.recall,
            r.f1,
            get(&r.hitrate, 100),
            get(&r.hitrate, 150),
            get(&r.ndcg, 100),
            get(&r.ndcg, 150)
        );
    }
    out
}

#[cfg(test)]
mod tests;

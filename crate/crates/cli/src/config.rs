use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use radnet::data::SynthConfig;
use radnet::incident::PercentilePreset;
use radnet::model::{RadNetConfig, Variant};
use radnet::pipeline::DetectConfig;
use radnet::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a command needs. Loaded from a JSON file, then overridden by
/// flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Forecast horizons in intervals.
    pub horizons: Vec<usize>,
    pub variant: Variant,
    pub seed: u64,
    pub window: usize,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    /// Named initial-percentile schedule; replaces `detect.pot.percentile`
    /// with one value per entry of `horizons`.
    pub preset: Option<String>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out: PathBuf::from("out"),
            horizons: vec![1, 3, 6, 12],
            variant: Variant::Full,
            seed: 0,
            window: radnet::model::DEFAULT_WINDOW,
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            preset: None,
            synth: SynthConfig::default(),
        }
    }
}

/// Flag values that override the file; `None` keeps the file or default.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub horizons: Option<Vec<usize>>,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(d) = &flags.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &flags.out {
            cfg.out = o.clone();
        }
        if let Some(h) = &flags.horizons {
            cfg.horizons = h.clone();
        }
        if let Some(v) = flags.variant {
            cfg.variant = v;
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            bail!("horizons must be a non-empty list of positive intervals");
        }
        if let Some(p) = &self.preset {
            if PercentilePreset::by_name(p).is_none() {
                bail!("unknown percentile preset `{p}` (expected radset, metr-la or pems)");
            }
        }
        self.train.validate()?;
        self.detect.pot.validate()?;
        Ok(())
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .context("no dataset directory given; pass --data or set `data` in the config file")
    }

    pub fn model_config(&self, n_nodes: usize, n_features: usize, horizon: usize) -> RadNetConfig {
        RadNetConfig {
            window: self.window,
            horizon,
            variant: self.variant,
            seed: self.seed,
            ..RadNetConfig::new(n_nodes, n_features)
        }
    }

    /// Detection settings for the `index`-th horizon.
    pub fn detect_for(&self, index: usize) -> DetectConfig {
        let mut d = self.detect;
        if let Some(p) = self.preset.as_deref().and_then(PercentilePreset::by_name) {
            d.pot.percentile = p.percentile(index);
        }
        d
    }

    pub fn checkpoint_dir(&self, horizon: usize) -> PathBuf {
        self.out.join("checkpoints").join(format!("h{horizon}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(&file, r#"{"seed": 5, "horizons": [2], "variant": "no_st"}"#).unwrap();

        let d = RunConfig::resolve(None, &Overrides::default()).unwrap();
        assert_eq!(
            (d.seed, d.horizons.clone(), d.variant),
            (0, vec![1, 3, 6, 12], Variant::Full)
        );

        let f = RunConfig::resolve(Some(&file), &Overrides::default()).unwrap();
        assert_eq!(
            (f.seed, f.horizons.clone(), f.variant),
            (5, vec![2], Variant::NoSt)
        );
        assert_eq!(f.train.seed, 5);

        let flags = Overrides {
            seed: Some(9),
            variant: Some(Variant::NoTs),
            ..Default::default()
        };
        let o = RunConfig::resolve(Some(&file), &flags).unwrap();
        assert_eq!((o.seed, o.horizons, o.variant), (9, vec![2], Variant::NoTs));
    }

    #[test]
    fn preset_lowers_percentile_per_horizon() {
        let cfg = RunConfig {
            preset: Some("metr-la".into()),
            ..Default::default()
        };
        assert_eq!(cfg.detect_for(0).pot.percentile, 50.0);
        assert_eq!(cfg.detect_for(2).pot.percentile, 45.0);
    }

    #[test]
    fn bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(&file, r#"{"horizons": [0]}"#).unwrap();
        assert!(RunConfig::resolve(Some(&file), &Overrides::default()).is_err());
        std::fs::write(&file, r#"{"sede": 1}"#).unwrap();
        assert!(RunConfig::resolve(Some(&file), &Overrides::default()).is_err());
    }
}

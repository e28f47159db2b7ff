//! The RadNet forecaster: two inference paths over a window, a learned
//! convex fusion with the latest observation, and a feed-forward decoder.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSeries, Normalizer};
use crate::engine::nn::DEFAULT_LEAKY_SLOPE;
use crate::engine::{Activation, FeedForward, LayerSpec, Linear, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{GatLayer, HeadAggregation, RoadGraph};
use crate::temporal::{
    DecoderQuery, TemporalMode, Transformer, TransformerConfig, DEFAULT_DROPOUT,
};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_TEACHER_FORCING: f64 = 0.2;
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoSkip,
    NoSt,
    NoTs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSkip, Variant::NoSt, Variant::NoTs];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSkip => "no_skip",
            Variant::NoSt => "no_st",
            Variant::NoTs => "no_ts",
        }
    }

    fn has_spatio_temporal(self) -> bool {
        self != Variant::NoSt
    }

    fn has_temporo_spatial(self) -> bool {
        self != Variant::NoTs
    }

    fn n_fused(self) -> usize {
        match self {
            Variant::Full | Variant::NoSkip => 3,
            Variant::NoSt | Variant::NoTs => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown variant `{s}` (full, no_skip, no_st, no_ts)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadNetConfig {
    /// Window length `K`.
    pub window: usize,
    /// Forecast horizon `H` in intervals.
    pub horizon: usize,
    pub n_nodes: usize,
    pub n_features: usize,
    pub gat_heads: usize,
    /// Defaults to the number of features when `None`.
    pub transformer_heads: Option<usize>,
    pub temporal_mode: TemporalMode,
    pub decoder_query: DecoderQuery,
    pub decoder_hidden: Vec<usize>,
    pub dropout: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for RadNetConfig {
    fn default() -> Self {
        RadNetConfig {
            window: DEFAULT_WINDOW,
            horizon: 1,
            n_nodes: 0,
            n_features: 0,
            gat_heads: 1,
            transformer_heads: None,
            temporal_mode: TemporalMode::Flattened,
            decoder_query: DecoderQuery::Window,
            decoder_hidden: vec![64, 64],
            dropout: DEFAULT_DROPOUT,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl RadNetConfig {
    pub fn new(n_nodes: usize, n_features: usize) -> Self {
        RadNetConfig {
            n_nodes,
            n_features,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.horizon == 0 {
            return Err(Error::arg("window length and horizon must be at least 1"));
        }
        if self.n_nodes == 0 || self.n_features == 0 {
            return Err(Error::arg("model needs at least one node and one feature"));
        }
        if self.gat_heads == 0 {
            return Err(Error::arg("GAT needs at least one head"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            n_nodes: self.n_nodes,
            n_features: self.n_features,
            n_heads: self.transformer_heads.unwrap_or(self.n_features),
            mode: self.temporal_mode,
            query: self.decoder_query,
            dropout: self.dropout,
        }
    }
}

/// Forecast for one source timestep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Forecast {
    pub prediction: Tensor,
    /// Convex fusion weights; empty for the plain-sum variant.
    pub path_weights: Vec<f64>,
    pub source: usize,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub prediction: Var,
    pub weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct RadNet {
    pub config: RadNetConfig,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    st_gat: Option<GatLayer>,
    st_transformer: Option<Transformer>,
    ts_transformer: Option<Transformer>,
    ts_gat: Option<GatLayer>,
    fusion: Option<Linear>,
    decoder: FeedForward,
}

#[derive(Serialize, Deserialize)]
struct Saved {
    config: RadNetConfig,
    normalizer: Normalizer,
}

impl RadNet {
    pub fn new(config: RadNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (n, d) = (config.n_nodes, config.n_features);
        let tf = config.transformer();
        let gat = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            GatLayer::new(
                store,
                name,
                d,
                d,
                config.gat_heads,
                HeadAggregation::Mean,
                rng,
            )
        };
        let v = config.variant;
        let (st_gat, st_transformer) = if v.has_spatio_temporal() {
            let g = gat(&mut store, "st.gat", &mut rng);
            let t = Transformer::new(&mut store, "st.transformer", tf, &mut rng)?;
            (Some(g), Some(t))
        } else {
            (None, None)
        };
        let (ts_transformer, ts_gat) = if v.has_temporo_spatial() {
            let t = Transformer::new(&mut store, "ts.transformer", tf, &mut rng)?;
            let g = gat(&mut store, "ts.gat", &mut rng);
            (Some(t), Some(g))
        } else {
            (None, None)
        };
        let fusion = (v != Variant::NoSkip)
            .then(|| Linear::new(&mut store, "fusion", n * d, v.n_fused(), true, &mut rng));
        let mut widths = vec![n * d];
        widths.extend(&config.decoder_hidden);
        widths.push(n * d);
        let spec = LayerSpec {
            widths,
            hidden_activation: Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
            output_activation: Activation::Identity,
        };
        let decoder = FeedForward::new(&mut store, "decoder", &spec, &mut rng)?;
        Ok(RadNet {
            normalizer: Normalizer::identity(d),
            config,
            params: store,
            st_gat,
            st_transformer,
            ts_transformer,
            ts_gat,
            fusion,
            decoder,
        })
    }

    /// Records one forward pass for a normalised window `[K, N, D]`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        window: Var,
        g: &RoadGraph,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let (n, d) = (c.n_nodes, c.n_features);
        if g.n_nodes() != n {
            return Err(Error::dims("radnet_forward", &[g.n_nodes()], &[n]));
        }
        let s = tape.shape(window).to_vec();
        if s.len() != 3 || s[0] == 0 || s[1] != n || s[2] != d {
            return Err(Error::dims("radnet_forward", &s, &[c.window, n, d]));
        }
        let x_t = tape.select(window, 0, s[0] - 1)?;
        let mut terms = Vec::with_capacity(3);
        if let (Some(gat), Some(tf)) = (&self.st_gat, &self.st_transformer) {
            let wg = gat.forward_window(tape, store, window, g)?;
            terms.push(tf.forward(tape, store, wg)?);
        }
        if let (Some(tf), Some(gat)) = (&self.ts_transformer, &self.ts_gat) {
            let wt = tf.forward(tape, store, window)?;
            terms.push(gat.forward(tape, store, wt, g)?);
        }
        terms.push(x_t);

        let (fused, weights) = match &self.fusion {
            None => {
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = tape.add(acc, t)?;
                }
                (acc, None)
            }
            Some(fusion) => {
                let flat = tape.reshape(x_t, &[1, n * d])?;
                let logits = fusion.forward(tape, store, flat)?;
                let w = tape.softmax(logits, 1)?;
                let w = tape.reshape(w, &[terms.len()])?;
                let mut acc = None;
                for (i, &t) in terms.iter().enumerate() {
                    let wi = tape.narrow(w, 0, i, 1)?;
                    let term = tape.mul(t, wi)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                (acc.expect("at least one term"), Some(w))
            }
        };
        let flat = tape.reshape(fused, &[1, n * d])?;
        let out = self.decoder.forward(tape, store, flat)?;
        let prediction = tape.reshape(out, &[n, d])?;
        Ok(ForwardVars {
            prediction,
            weights,
        })
    }

    /// Evaluation-mode forecast from a normalised window.
    pub fn forward(&self, window: &Tensor, g: &RoadGraph) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let w = tape.constant(window.clone());
        let out = self.forward_on(&mut tape, &self.params, w, g)?;
        let weights = out
            .weights
            .map(|w| tape.value(w).data().to_vec())
            .unwrap_or_default();
        Ok((tape.value(out.prediction).clone(), weights))
    }

    /// Forecast of `X^(t+H)` in original units from the raw series.
    pub fn predict(&self, series: &FeatureSeries, g: &RoadGraph, t: usize) -> Result<Forecast> {
        let mut window = build_window(series, t, self.config.window)?;
        self.normalizer.apply_slice(window.data_mut());
        let (pred, path_weights) = self.forward(&window, g)?;
        Ok(Forecast {
            prediction: self.normalizer.invert(&pred),
            path_weights,
            source: t,
        })
    }

    /// Repeated single-step forecasts from a normalised window; each
    /// prediction is appended and the oldest slice dropped.
    pub fn rollout_autoregressive(
        &self,
        window: &Tensor,
        g: &RoadGraph,
        steps: usize,
    ) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::arg("rollout needs at least one step"));
        }
        let mut tape = Tape::new();
        let w = tape.constant(window.clone());
        let preds = self.rollout_on(&mut tape, &self.params, w, g, steps, |_, _| None)?;
        Ok(tape.value(*preds.last().expect("steps >= 1")).clone())
    }

    /// Rollout recorded on a tape. `next_input(step, tape)` may supply the
    /// slice appended after `step` (teacher forcing); otherwise the
    /// prediction is used.
    pub fn rollout_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        window: Var,
        g: &RoadGraph,
        steps: usize,
        mut next_input: impl FnMut(usize, &mut Tape) -> Option<Var>,
    ) -> Result<Vec<Var>> {
        let k = self.config.window;
        let (n, d) = (self.config.n_nodes, self.config.n_features);
        let mut w = window;
        let mut preds = Vec::with_capacity(steps);
        for step in 0..steps {
            let out = self.forward_on(tape, store, w, g)?;
            preds.push(out.prediction);
            if step + 1 < steps {
                let next = next_input(step, tape).unwrap_or(out.prediction);
                let next = tape.reshape(next, &[1, n, d])?;
                w = if k == 1 {
                    next
                } else {
                    let kept = tape.narrow(w, 0, 1, k - 1)?;
                    tape.concat(&[kept, next], 0)?
                };
            }
        }
        Ok(preds)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_scalars()
    }

    /// Per-component scalar counts from layer sizes.
    pub fn parameter_ledger(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        if let Some(g) = &self.st_gat {
            out.push(("st.gat".into(), g.n_params()));
        }
        if let Some(t) = &self.st_transformer {
            out.push(("st.transformer".into(), t.n_params()));
        }
        if let Some(t) = &self.ts_transformer {
            out.push(("ts.transformer".into(), t.n_params()));
        }
        if let Some(g) = &self.ts_gat {
            out.push(("ts.gat".into(), g.n_params()));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion".into(), f.n_params()));
        }
        out.push(("decoder".into(), self.decoder.n_params()));
        out
    }

    /// Writes the parameter checkpoint plus `config.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let saved = Saved {
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
        };
        let hyper = serde_json::to_value(&saved)?;
        self.params.save(dir, self.config.seed, hyper)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&saved)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, manifest) = ParamStore::load(dir)?;
        let saved: Saved = serde_json::from_value(manifest.hyperparameters)
            .map_err(|e| Error::Format(format!("checkpoint hyperparameters: {e}")))?;
        let mut model = RadNet::new(saved.config)?;
        model.params.assign_from(&store)?;
        model.normalizer = saved.normalizer;
        Ok(model)
    }
}

/// `[K, N, D]` window of slices `t-K+1..=t`; slices before 0 repeat `X^(0)`.
pub fn build_window(series: &FeatureSeries, t: usize, k: usize) -> Result<Tensor> {
    if t >= series.len() {
        return Err(Error::Index {
            index: t,
            len: series.len(),
        });
    }
    if k == 0 {
        return Err(Error::arg("window length must be at least 1"));
    }
    let mut data = Vec::with_capacity(k * series.n_nodes() * series.n_features());
    for j in 0..k {
        let s = (t + j + 1).saturating_sub(k);
        data.extend_from_slice(series.frame_slice(s));
    }
    Tensor::new(vec![k, series.n_nodes(), series.n_features()], data)
}

/// Frobenius norm of `prediction - truth`.
pub fn loss(tape: &mut Tape, prediction: Var, truth: Var) -> Result<Var> {
    if tape.shape(prediction) != tape.shape(truth) {
        return Err(Error::dims(
            "loss",
            tape.shape(prediction),
            tape.shape(truth),
        ));
    }
    let diff = tape.sub(prediction, truth)?;
    Ok(tape.norm(diff))
}

pub fn loss_value(prediction: &Tensor, truth: &Tensor) -> Result<f64> {
    if prediction.shape() != truth.shape() {
        return Err(Error::dims("loss", prediction.shape(), truth.shape()));
    }
    Ok(prediction
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Seeded Bernoulli draws deciding whether ground truth replaces a
/// prediction during autoregressive training.
#[derive(Debug, Clone)]
pub struct TeacherForcing {
    pub probability: f64,
    rng: ChaCha8Rng,
}

impl TeacherForcing {
    pub fn new(probability: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::arg(format!(
                "teacher-forcing probability {probability} outside [0, 1]"
            )));
        }
        Ok(TeacherForcing {
            probability,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `true` means feed the ground truth.
    pub fn draw(&mut self) -> bool {
        self.rng.random_bool(self.probability)
    }
}

//! Sinusoidal position encoding and Transformer encoder/decoder blocks for
//! inference along the time axis of a window.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::nn::DEFAULT_LEAKY_SLOPE;
use crate::engine::{
    Activation, FeedForward, LayerNorm, LayerSpec, Linear, ParamStore, Tape, Tensor, Var,
};
use crate::error::{Error, Result};

pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const FEED_FORWARD_HIDDEN: usize = 16;

/// How node features are laid out for attention over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// One sequence of width `N·D`.
    #[default]
    Flattened,
    /// `N` independent sequences of width `D` sharing parameters.
    PerNode,
}

/// What the decoder attends over causally before cross-attending the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderQuery {
    /// The input window itself.
    #[default]
    Window,
    /// The last observation repeated `K` times.
    LastObservation,
}

/// Sinusoid value for time `pos` and channel `c` of a width-`width` signal.
pub fn sinusoid(pos: usize, c: usize, width: usize) -> f64 {
    let pair = (c / 2) as f64 * 2.0;
    let angle = pos as f64 / 10000f64.powf(pair / width as f64);
    if c.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

pub fn position_table(len: usize, width: usize) -> Tensor {
    let data = (0..len)
        .flat_map(|p| (0..width).map(move |c| sinusoid(p, c, width)))
        .collect();
    Tensor::new(vec![len, width], data).expect("table size")
}

/// Adds the position signal to `x: [..., K, F]` and applies dropout.
pub fn position_encode(tape: &mut Tape, x: Var, dropout: f64) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() < 2 || shape.contains(&0) {
        return Err(Error::dims("position_encode", shape, &[1, 1]));
    }
    let (k, f) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let pe = tape.constant(position_table(k, f));
    let y = tape.add(x, pe)?;
    tape.dropout(y, dropout)
}

/// Lower-triangular keep-mask of size `len × len`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len <= i / len).collect()
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::arg(format!(
                "model width {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let mut lin = |suffix: &str| {
            Linear::new(
                store,
                &format!("{name}.{suffix}"),
                d_model,
                d_model,
                true,
                rng,
            )
        };
        Ok(MultiHeadAttention {
            query: lin("query"),
            key: lin("key"),
            value: lin("value"),
            output: lin("output"),
            n_heads,
            d_model,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Scaled dot-product attention for `q: [..., Lq, d]`, `k, v: [..., Lk, d]`.
    /// `mask` is an `Lq × Lk` keep-mask. Returns the projected output and the
    /// attention weights `[..., O, Lq, Lk]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let (lq, lk) = (seq_len(tape, q)?, seq_len(tape, k)?);
        if seq_len(tape, v)? != lk {
            return Err(Error::dims(
                "multi_head_attention",
                tape.shape(k),
                tape.shape(v),
            ));
        }
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(Error::dims("attention_mask", &[lq, lk], &[m.len()]));
            }
        }
        let qh = self.split_heads(tape, store, &self.query, q)?;
        let kh = self.split_heads(tape, store, &self.key, k)?;
        let vh = self.split_heads(tape, store, &self.value, v)?;
        let r = tape.shape(kh).len();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        let kt = tape.permute(kh, &axes)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (self.d_model as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.masked_fill(scores, m)?;
        }
        let weights = tape.softmax(scores, r - 1)?;
        let ctx = tape.matmul(weights, vh)?;
        // [..., O, Lq, dh] -> [..., Lq, O·dh]
        let ctx = tape.permute(ctx, &swap_last_but_one(r))?;
        let mut shape = tape.shape(ctx).to_vec();
        shape.truncate(r - 2);
        shape.push(self.d_model);
        let ctx = tape.reshape(ctx, &shape)?;
        let out = self.output.forward(tape, store, ctx)?;
        Ok((out, weights))
    }

    // [..., L, d] -> [..., O, L, dh]
    fn split_heads(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        proj: &Linear,
        x: Var,
    ) -> Result<Var> {
        let y = proj.forward(tape, store, x)?;
        let mut shape = tape.shape(y).to_vec();
        shape.pop();
        shape.extend([self.n_heads, self.head_width()]);
        let r = shape.len();
        let y = tape.reshape(y, &shape)?;
        tape.permute(y, &swap_last_but_one(r))
    }

    pub fn n_params(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .map(|l| l.n_params())
            .sum()
    }
}

fn seq_len(tape: &Tape, x: Var) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() < 2 {
        return Err(Error::dims("multi_head_attention", s, &[1, 1]));
    }
    Ok(s[s.len() - 2])
}

// permutation swapping axes r-3 and r-2 of a rank-r array
fn swap_last_but_one(r: usize) -> Vec<usize> {
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 3, r - 2);
    axes
}

fn feed_forward_spec(d_model: usize) -> LayerSpec {
    LayerSpec {
        widths: vec![d_model, FEED_FORWARD_HIDDEN, d_model],
        hidden_activation: Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
        output_activation: Activation::Identity,
    }
}

/// Self-attention and feed-forward sublayers, each wrapped in a residual
/// connection and layer norm. The feed-forward branch reads the block input.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub feed_forward: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attention: MultiHeadAttention::new(
                store,
                &format!("{name}.attention"),
                d_model,
                n_heads,
                rng,
            )?,
            feed_forward: FeedForward::new(
                store,
                &format!("{name}.ff"),
                &feed_forward_spec(d_model),
                rng,
            )?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            dropout,
        })
    }

    /// `wp: [..., K, d_model]`, already position-encoded.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, wp: Var) -> Result<Var> {
        check_width(tape, wp, self.attention.d_model, "encoder_block")?;
        let (att, _) = self.attention.forward(tape, store, wp, wp, wp, None)?;
        let att = tape.dropout(att, self.dropout)?;
        let w11 = tape.add(wp, att)?;
        let w11 = self.norm1.forward(tape, store, w11)?;
        let ff = self.feed_forward.forward(tape, store, wp)?;
        let ff = tape.dropout(ff, self.dropout)?;
        let w12 = tape.add(w11, ff)?;
        self.norm2.forward(tape, store, w12)
    }

    pub fn n_params(&self) -> usize {
        self.attention.n_params() + self.feed_forward.n_params() + 4 * self.norm1.width
    }
}

/// Causal self-attention over the query source, then cross-attention from
/// that into the encoder output. The closing residual adds the encoder
/// output.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attention: MultiHeadAttention,
    pub cross_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            self_attention: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attention"),
                d_model,
                n_heads,
                rng,
            )?,
            cross_attention: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attention"),
                d_model,
                n_heads,
                rng,
            )?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            dropout,
        })
    }

    /// `query: [..., K, d]` position-encoded query source, `memory: [..., K, d]`
    /// encoder output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        memory: Var,
    ) -> Result<Var> {
        check_width(tape, query, self.self_attention.d_model, "decoder_block")?;
        check_width(tape, memory, self.self_attention.d_model, "decoder_block")?;
        let k = seq_len(tape, query)?;
        let mask = causal_mask(k);
        let (s, _) = self
            .self_attention
            .forward(tape, store, query, query, query, Some(&mask))?;
        let s = tape.dropout(s, self.dropout)?;
        let d12 = tape.add(query, s)?;
        let d12 = self.norm1.forward(tape, store, d12)?;
        let (c, _) = self
            .cross_attention
            .forward(tape, store, d12, memory, memory, None)?;
        let c = tape.dropout(c, self.dropout)?;
        let out = tape.add(memory, c)?;
        self.norm2.forward(tape, store, out)
    }

    pub fn n_params(&self) -> usize {
        self.self_attention.n_params() + self.cross_attention.n_params() + 4 * self.norm1.width
    }
}

fn check_width(tape: &Tape, x: Var, width: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() < 2 || s[s.len() - 1] != width {
        return Err(Error::dims(op, s, &[width]));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_nodes: usize,
    pub n_features: usize,
    pub n_heads: usize,
    pub mode: TemporalMode,
    pub query: DecoderQuery,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn d_model(&self) -> usize {
        match self.mode {
            TemporalMode::Flattened => self.n_nodes * self.n_features,
            TemporalMode::PerNode => self.n_features,
        }
    }
}

/// Encoder plus decoder applied to a window `[K, N, D]`, returning the
/// final time slice as `[N, D]`.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub encoder: EncoderBlock,
    pub decoder: DecoderBlock,
}

impl Transformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = config.d_model();
        if d == 0 {
            return Err(Error::arg(
                "transformer needs at least one node and feature",
            ));
        }
        Ok(Transformer {
            config,
            encoder: EncoderBlock::new(
                store,
                &format!("{name}.encoder"),
                d,
                config.n_heads,
                config.dropout,
                rng,
            )?,
            decoder: DecoderBlock::new(
                store,
                &format!("{name}.decoder"),
                d,
                config.n_heads,
                config.dropout,
                rng,
            )?,
        })
    }

    /// Decoder output at every position, laid out as `[K, d]` (flattened) or
    /// `[N, K, d]` (per node).
    pub fn sequence(&self, tape: &mut Tape, store: &ParamStore, window: Var) -> Result<Var> {
        let c = self.config;
        let s = tape.shape(window).to_vec();
        if s.len() != 3 || s[0] == 0 || s[1] != c.n_nodes || s[2] != c.n_features {
            return Err(Error::dims(
                "transformer_forward",
                &s,
                &[s.first().copied().unwrap_or(0), c.n_nodes, c.n_features],
            ));
        }
        let k = s[0];
        let seq = match c.mode {
            TemporalMode::Flattened => tape.reshape(window, &[k, c.n_nodes * c.n_features])?,
            TemporalMode::PerNode => tape.permute(window, &[1, 0, 2])?,
        };
        let query = match c.query {
            DecoderQuery::Window => seq,
            DecoderQuery::LastObservation => {
                let r = tape.shape(seq).len();
                let last = tape.narrow(seq, r - 2, k - 1, 1)?;
                tape.concat(&vec![last; k], r - 2)?
            }
        };
        let wp = position_encode(tape, seq, c.dropout)?;
        let qp = position_encode(tape, query, c.dropout)?;
        let memory = self.encoder.forward(tape, store, wp)?;
        self.decoder.forward(tape, store, qp, memory)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, window: Var) -> Result<Var> {
        let c = self.config;
        let out = self.sequence(tape, store, window)?;
        let r = tape.shape(out).len();
        let k = tape.shape(out)[r - 2];
        let last = tape.select(out, r - 2, k - 1)?;
        tape.reshape(last, &[c.n_nodes, c.n_features])
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.decoder.n_params()
    }
}

//! Road-network graph and the multi-head graph-attention layer.
//!
//! Nodes are road links; an undirected edge joins two links that share a
//! junction. Every node carries a self-loop so that attention always
//! includes the node's own features.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::nn::DEFAULT_LEAKY_SLOPE;
use crate::engine::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoadGraph {
    n_nodes: usize,
    /// Undirected edges `(i, j)` with `i < j`; self-loops are implicit.
    edges: BTreeSet<(usize, usize)>,
    /// Sorted neighbourhood of each node, self included.
    neighborhoods: Vec<Vec<usize>>,
}

impl RoadGraph {
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::Structural(format!(
                    "edge ({a},{b}) references a node outside [0,{n_nodes})"
                )));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let mut neighborhoods: Vec<Vec<usize>> = (0..n_nodes).map(|i| vec![i]).collect();
        for &(a, b) in &set {
            neighborhoods[a].push(b);
            neighborhoods[b].push(a);
        }
        for n in &mut neighborhoods {
            n.sort_unstable();
        }
        Ok(RoadGraph {
            n_nodes,
            edges: set,
            neighborhoods,
        })
    }

    /// Path graph `0 – 1 – … – n-1`.
    pub fn path(n_nodes: usize) -> Self {
        Self::new(n_nodes, (1..n_nodes).map(|i| (i - 1, i))).expect("valid path")
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Number of undirected edges, self-loops excluded.
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i == j || self.edges.contains(&(i.min(j), i.max(j)))
    }

    /// Row-major `N×N` flags: `true` where `j ∈ 𝒩ᵢ`.
    pub fn adjacency_mask(&self) -> Vec<bool> {
        let n = self.n_nodes;
        let mut mask = vec![false; n * n];
        for (i, nb) in self.neighborhoods.iter().enumerate() {
            for &j in nb {
                mask[i * n + j] = true;
            }
        }
        mask
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_nodes {
            return Err(Error::arg("permutation length differs from node count"));
        }
        Self::new(self.n_nodes, self.edges().map(|(a, b)| (perm[a], perm[b])))
    }

    /// Reads a `src,dst` CSV edge list. Offending rows are reported by line.
    pub fn read_edge_csv(n_nodes: usize, reader: impl Read) -> Result<Self> {
        let mut edges = Vec::new();
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format("edge list is empty".into()))?;
        if header.trim() != "src,dst" {
            return Err(Error::Format(format!(
                "edge list header `{header}`, expected `src,dst`"
            )));
        }
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = lineno + 2;
            let mut parts = line.split(',').map(str::trim);
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|v| v.parse().ok()).ok_or_else(|| {
                    Error::Format(format!("edges.csv row {row}: `{line}` is not `src,dst`"))
                })
            };
            let (a, b) = (parse(parts.next())?, parse(parts.next())?);
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::Structural(format!(
                    "edges.csv row {row}: `{line}` references node id >= {n_nodes}"
                )));
            }
            edges.push((a, b));
        }
        Self::new(n_nodes, edges)
    }

    pub fn write_edge_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "src,dst")?;
        for (a, b) in self.edges() {
            writeln!(w, "{a},{b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadAggregation {
    Concat,
    Mean,
}

#[derive(Debug, Clone)]
struct GatHead {
    theta: ParamId,
    attn_src: ParamId,
    attn_dst: ParamId,
    attn_bias: ParamId,
}

/// One multi-head graph-attention layer.
///
/// Per head `m`: `z = X θ`, `e_ij = LeakyReLU(a_src·z_i + a_dst·z_j + b)`,
/// `α_ij = softmax_{j∈𝒩ᵢ}(e_ij)`, `h'_i = sigmoid(Σ_j α_ij z_j)`. Heads are
/// concatenated or averaged.
#[derive(Debug, Clone)]
pub struct GatLayer {
    heads: Vec<GatHead>,
    pub d_in: usize,
    pub d_out: usize,
    pub aggregation: HeadAggregation,
    pub leaky_slope: f64,
}

/// Attention weights of one head, restricted to graph edges.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `rows[i]` lists `(j, α_ij)` for `j ∈ 𝒩ᵢ`, ascending `j`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl AttentionMap {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows[i].iter().find(|(k, _)| *k == j).map(|(_, a)| *a)
    }
}

impl GatLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        n_heads: usize,
        aggregation: HeadAggregation,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let abound = (6.0 / (2 * d_out + 1) as f64).sqrt();
        let heads = (0..n_heads.max(1))
            .map(|m| GatHead {
                theta: store.add_uniform(format!("{name}.h{m}.theta"), &[d_in, d_out], bound, rng),
                attn_src: store.add_uniform(
                    format!("{name}.h{m}.attn_src"),
                    &[d_out, 1],
                    abound,
                    rng,
                ),
                attn_dst: store.add_uniform(
                    format!("{name}.h{m}.attn_dst"),
                    &[d_out, 1],
                    abound,
                    rng,
                ),
                attn_bias: store.add_uniform(format!("{name}.h{m}.attn_bias"), &[1], abound, rng),
            })
            .collect();
        GatLayer {
            heads,
            d_in,
            d_out,
            aggregation,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn output_width(&self) -> usize {
        match self.aggregation {
            HeadAggregation::Concat => self.d_out * self.heads.len(),
            HeadAggregation::Mean => self.d_out,
        }
    }

    /// Parameter slots of head `m`: (θ, a_src, a_dst, bias).
    pub fn head_params(&self, m: usize) -> (ParamId, ParamId, ParamId, ParamId) {
        let h = &self.heads[m];
        (h.theta, h.attn_src, h.attn_dst, h.attn_bias)
    }

    fn check_input(&self, tape: &Tape, x: Var, g: &RoadGraph) -> Result<()> {
        let s = tape.shape(x);
        if s.len() < 2 || s[s.len() - 2] != g.n_nodes() || s[s.len() - 1] != self.d_in {
            return Err(Error::dims("gat", s, &[g.n_nodes(), self.d_in]));
        }
        Ok(())
    }

    /// Records `(z, α)` for one head; `α` is `[..., N, N]` with zeros off the
    /// graph.
    fn head_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        m: usize,
    ) -> Result<(Var, Var)> {
        let h = &self.heads[m];
        let theta = tape.param(store, h.theta);
        let z = tape.matmul(x, theta)?;
        let a_src = tape.param(store, h.attn_src);
        let a_dst = tape.param(store, h.attn_dst);
        let s_src = tape.matmul(z, a_src)?; // [..., N, 1]
        let s_dst = tape.matmul(z, a_dst)?; // [..., N, 1]
        let rank = tape.shape(s_dst).len();
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        let s_dst_t = tape.permute(s_dst, &axes)?; // [..., 1, N]
        let e = tape.add(s_src, s_dst_t)?;
        let bias = tape.param(store, h.attn_bias);
        let e = tape.add(e, bias)?;
        let e = tape.leaky_relu(e, self.leaky_slope);
        let e = tape.masked_fill(e, mask)?;
        let alpha = tape.softmax(e, rank - 1)?;
        Ok((z, alpha))
    }

    /// Dense attention weights `[..., N, N]` for head `m`.
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        g: &RoadGraph,
        m: usize,
    ) -> Result<Var> {
        self.check_input(tape, x, g)?;
        if m >= self.heads.len() {
            return Err(Error::Index {
                index: m,
                len: self.heads.len(),
            });
        }
        let mask = g.adjacency_mask();
        Ok(self.head_attention(tape, store, x, &mask, m)?.1)
    }

    /// Attention coefficients `α^m_ij` on the edges of `g` for a single
    /// `N×D_in` feature matrix.
    pub fn attention_coefficients(
        &self,
        store: &ParamStore,
        x: &crate::engine::Tensor,
        g: &RoadGraph,
        m: usize,
    ) -> Result<AttentionMap> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let alpha = self.attention(&mut tape, store, xv, g, m)?;
        let dense = tape.value(alpha);
        if dense.ndim() != 2 {
            return Err(Error::arg(
                "attention_coefficients expects a single N×D matrix",
            ));
        }
        let n = g.n_nodes();
        let rows = (0..n)
            .map(|i| {
                let nb = g.neighbors(i);
                if nb.is_empty() {
                    return Err(Error::Structural(format!(
                        "node {i} has an empty neighbourhood"
                    )));
                }
                Ok(nb.iter().map(|&j| (j, dense.data()[i * n + j])).collect())
            })
            .collect::<Result<_>>()?;
        Ok(AttentionMap { rows })
    }

    /// Applies the layer to `[..., N, D_in]`; leading axes (e.g. a window
    /// of K feature matrices) are processed independently with shared
    /// parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        g: &RoadGraph,
    ) -> Result<Var> {
        self.check_input(tape, x, g)?;
        let mask = g.adjacency_mask();
        let mut outs = Vec::with_capacity(self.heads.len());
        for m in 0..self.heads.len() {
            let (z, alpha) = self.head_attention(tape, store, x, &mask, m)?;
            let agg = tape.matmul(alpha, z)?;
            outs.push(tape.sigmoid(agg));
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        match self.aggregation {
            HeadAggregation::Concat => {
                let axis = tape.shape(outs[0]).len() - 1;
                tape.concat(&outs, axis)
            }
            HeadAggregation::Mean => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                Ok(tape.scale(acc, 1.0 / outs.len() as f64))
            }
        }
    }

    /// GAT over a stacked window `[K, N, D_in]`, one slice at a time.
    pub fn forward_window(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        window: Var,
        g: &RoadGraph,
    ) -> Result<Var> {
        if tape.shape(window).len() != 3 {
            return Err(Error::dims(
                "gat_over_window",
                tape.shape(window),
                &[0, g.n_nodes(), self.d_in],
            ));
        }
        self.forward(tape, store, window, g)
    }

    pub fn n_params(&self) -> usize {
        self.heads.len() * (self.d_in * self.d_out + 2 * self.d_out + 1)
    }
}

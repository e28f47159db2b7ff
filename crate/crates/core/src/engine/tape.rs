//! Dynamic reverse-mode tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node list
//! visits each node after all of its consumers. Parameters enter the tape as
//! leaves linked back to their slot in a [`ParamStore`]; after
//! [`Tape::backward`] their gradients are collected with
//! [`Tape::param_grads`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{broadcast_index_map, broadcast_shape, gemm, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    MaskedFill {
        input: Var,
        keep: Vec<bool>,
    },
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Norm(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
}

/// One recorded array: its value, lazily allocated gradient, and the
/// operation that produced it.
#[derive(Debug, Clone)]
pub struct DiffArray {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<DiffArray>,
    params: Vec<(ParamId, Var)>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            params: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes, keeping the dropout stream.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn node(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(DiffArray {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a parameter slot; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some((_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.push((id, v));
        v
    }

    // ---- elementwise -------------------------------------------------

    fn broadcast_binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::dims(op_name, sa, sb))?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let ma = broadcast_index_map(sa, &out_shape);
            let mb = broadcast_index_map(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::new(out_shape, data)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes with broadcast leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; plan.out_numel()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        for (o, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
            gemm(
                &va[ia * m * k..(ia + 1) * m * k],
                &vb[ib * k * n..(ib + 1) * k * n],
                &mut out[o * m * n..(o + 1) * m * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    // ---- normalisation -----------------------------------------------

    /// Max-stabilised softmax along `axis`. `-inf` entries (from
    /// [`Tape::masked_fill`]) receive weight exactly zero.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!(
                "softmax axis {axis} for rank {}",
                shape.len()
            )));
        }
        let x = self.value(a).data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax", "NaN input"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::numeric("softmax", "slice is fully masked"));
                }
                if max == f64::INFINITY {
                    return Err(Error::numeric("softmax", "infinite input"));
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(shape, y)?;
        Ok(self.push(t, Op::Softmax { input: a, axis }, rg))
    }

    /// Replaces entries whose `keep` flag is false with `-inf`. `keep` covers
    /// the trailing axes of `a` and is tiled over the leading ones.
    pub fn masked_fill(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let numel = self.value(a).numel();
        if keep.is_empty() || !numel.is_multiple_of(keep.len()) {
            return Err(Error::dims("masked_fill", self.shape(a), &[keep.len()]));
        }
        let full: Vec<bool> = keep.iter().copied().cycle().take(numel).collect();
        let mut t = self.value(a).clone();
        for (v, &k) in t.data_mut().iter_mut().zip(&full) {
            if !k {
                *v = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::MaskedFill {
                input: a,
                keep: full,
            },
            rg,
        ))
    }

    /// Normalises each last-axis slice to zero mean and unit variance
    /// (no affine part). `eps` guards constant slices.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::arg("layer_norm of a scalar"))?;
        let x = self.value(a).data();
        let rows = x.len() / width.max(1);
        let mut y = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let s = &x[r * width..(r + 1) * width];
            let mean = s.iter().sum::<f64>() / width as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in y[r * width..(r + 1) * width].iter_mut().zip(s) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        let t = Tensor::new(shape, y)?;
        Ok(self.push(t, Op::LayerNorm { input: a, inv_std }, rg))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::arg(format!(
                "invalid permutation {axes:?} for rank {}",
                shape.len()
            )));
        }
        let t = permute_tensor(self.value(a), axes);
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`, keeping the axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Index {
                index: start + len,
                len: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Picks one index along `axis`, dropping the axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let n = self.narrow(a, axis, index, 1)?;
        let mut shape = self.shape(n).to_vec();
        shape.remove(axis);
        self.reshape(n, &shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::arg("concat of nothing"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::arg("concat axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(Error::dims("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let x = self.value(v).data();
                out.extend_from_slice(&x[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equally shaped arrays along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut expanded = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(v));
            expanded.push(self.reshape(v, &shape)?);
        }
        self.concat(&expanded, 0)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Frobenius norm of the whole array.
    pub fn norm(&mut self, a: Var) -> Var {
        let s = self.value(a).frobenius();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Norm(a), rg)
    }

    /// Inverted dropout: identity on evaluation tapes or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout rate {p} outside [0,1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if p == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mut t = self.value(a).clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout { input: a, mask }, rg))
    }

    // ---- reverse pass ------------------------------------------------

    /// Accumulates d(root)/d(node) into every node that requires a gradient.
    /// `root` must hold a single element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::dims("backward", self.shape(root), &[]));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let root_shape = self.shape(root).to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(&root_shape, 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g)?;
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Sums a broadcast gradient back onto an input of `in_shape`.
    fn unbroadcast(g: &Tensor, in_shape: &[usize]) -> Tensor {
        if g.shape() == in_shape {
            return g.clone();
        }
        let map = broadcast_index_map(in_shape, g.shape());
        let mut out = Tensor::zeros(in_shape);
        let d = out.data_mut();
        for (&i, v) in map.iter().zip(g.data()) {
            d[i] += v;
        }
        out
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let ga = Self::unbroadcast(g, self.shape(*a));
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = Self::unbroadcast(&g.map(|x| sign * x), self.shape(*b));
                    self.accumulate(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let out_shape = g.shape().to_vec();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let map = broadcast_index_map(self.shape(other), &out_shape);
                    let ov = self.value(other).data();
                    let prod: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(&map)
                        .map(|(gv, &j)| gv * ov[j])
                        .collect();
                    let full = Tensor::new(out_shape.clone(), prod)?;
                    let gt = Self::unbroadcast(&full, self.shape(this));
                    self.accumulate(this, gt);
                }
            }
            Op::Scale(a, c) => {
                let ga = g.map(|x| x * c);
                self.accumulate(*a, ga);
            }
            Op::MatMul(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let plan = MatmulPlan::new(&sa, &sb)?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let gd = g.data();
                if self.rg(*a) {
                    let vb = self.value(*b).data();
                    let mut ga = vec![0.0; sa.iter().product()];
                    for (o, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
                        // dA = dC · Bᵀ
                        gemm(
                            &gd[o * m * n..(o + 1) * m * n],
                            &vb[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            true,
                        );
                    }
                    self.accumulate(*a, Tensor::new(sa.clone(), ga)?);
                }
                if self.rg(*b) {
                    let va = self.value(*a).data();
                    let mut gb = vec![0.0; sb.iter().product()];
                    for (o, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
                        // dB = Aᵀ · dC
                        gemm(
                            &va[ia * m * k..(ia + 1) * m * k],
                            &gd[o * m * n..(o + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            k,
                            m,
                            n,
                            true,
                            false,
                        );
                    }
                    self.accumulate(*b, Tensor::new(sb, gb)?);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv >= 0.0 { *gv } else { gv * slope })
                    .collect();
                let ga = Tensor::new(g.shape().to_vec(), data)?;
                self.accumulate(*a, ga);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                let ga = Tensor::new(g.shape().to_vec(), data)?;
                self.accumulate(*a, ga);
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[idx].value.data();
                let shape = g.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let gd = g.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(*input, Tensor::new(shape, gx)?);
            }
            Op::MaskedFill { input, keep } => {
                let data = g
                    .data()
                    .iter()
                    .zip(keep)
                    .map(|(gv, &k)| if k { *gv } else { 0.0 })
                    .collect();
                self.accumulate(*input, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::LayerNorm { input, inv_std } => {
                let y = self.nodes[idx].value.data();
                let width = *g.shape().last().unwrap_or(&1);
                let gd = g.data();
                let mut gx = vec![0.0; y.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let range = r * width..(r + 1) * width;
                    let gs = &gd[range.clone()];
                    let ys = &y[range.clone()];
                    let mean_g = gs.iter().sum::<f64>() / width as f64;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for ((o, gv), yv) in gx[range].iter_mut().zip(gs).zip(ys) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(*input, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshaped(self.shape(*a).to_vec())?;
                self.accumulate(*a, ga);
            }
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let ga = permute_tensor(g, &inverse);
                self.accumulate(*input, ga);
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let (outer, dim, inner) = axis_split(&in_shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(&in_shape);
                let d = gx.data_mut();
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = o * dim * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(src);
                }
                self.accumulate(*input, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = g.shape().to_vec();
                let (outer, total, inner) = axis_split(&shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let in_shape = self.shape(v).to_vec();
                    let d = in_shape[*axis];
                    if self.rg(v) {
                        let mut part = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            part.extend_from_slice(&g.data()[base..base + d * inner]);
                        }
                        self.accumulate(v, Tensor::new(in_shape, part)?);
                    }
                    offset += d;
                }
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.shape(*a), g.item());
                self.accumulate(*a, ga);
            }
            Op::Norm(a) => {
                let n = self.nodes[idx].value.item();
                let scale = if n > 0.0 { g.item() / n } else { 0.0 };
                let ga = self.value(*a).map(|x| x * scale);
                self.accumulate(*a, ga);
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                self.accumulate(*input, Tensor::new(g.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    /// Gradients of every parameter that entered this tape, aligned with
    /// `store`; parameters that were not used get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        for (id, v) in &self.params {
            if let Some(g) = self.grad(*v) {
                grads.get_mut(*id).add_assign(g);
            }
        }
        grads
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let numel = t.numel();
    let x = t.data();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..numel {
        out.push(x[pos]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves element count")
}

/// Batch bookkeeping for a broadcast matrix product.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dims("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dims("matmul", sa, sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::dims("matmul", sa, sb))?;
        let a_batch = broadcast_index_map(ba, &batch);
        let b_batch = broadcast_index_map(bb, &batch);
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            out_shape,
            a_batch,
            b_batch,
        })
    }

    fn out_numel(&self) -> usize {
        self.out_shape.iter().product()
    }
}

//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Tape`] records every operation executed through it together with the
//! values it produced. [`Tape::backward`] then walks the record in reverse and
//! returns a gradient for every trainable leaf. Trainable parameters are
//! usually borrowed from a [`ParamSet`] so building a tape per training
//! example copies no weights.

use alloc::borrow::Cow;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, ConvSpec, PoolMode};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Option<Var>, spec: ConvSpec },
    MatMul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    ScaleSpatial { x: Var, m: Var },
    GlobalPool { x: Var, mode: PoolMode, index: Vec<usize> },
    SpatialPool { x: Var, mode: PoolMode, index: Vec<usize> },
    ConcatChannels { parts: Vec<Var> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Transpose { x: Var },
    Reshape { x: Var },
    Scale { x: Var, c: f64 },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    MeanRows { x: Var },
    AvgPoolDown { x: Var, factor: usize },
    Sum { x: Var },
    Nll { p: Var, label: usize, floor: f64 },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for reverse-mode differentiation.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    n_params: usize,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    /// A tape whose first `params.len()` leaves are the borrowed, trainable
    /// tensors of `params` (see [`Tape::param`]).
    pub fn with_params(params: &'p ParamSet) -> Self {
        let nodes = params
            .tensors
            .iter()
            .map(|t| Node {
                value: Cow::Borrowed(t),
                op: Op::Leaf,
                requires_grad: true,
            })
            .collect();
        Tape {
            nodes,
            n_params: params.len(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.n_params, "parameter {} not on this tape", id.0);
        Var(id.0)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Trainable leaf owned by the tape.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.record(y, Op::Conv2d { x, k, b, spec }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(y, Op::MatMul { a, b }, &[a, b]))
    }

    /// Adds `b [m]` to every last-axis slice of `x [.., m]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let m = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [m] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let mut y = self.value(x).clone();
        ops::add_bias_in_place(&mut y, self.value(b));
        Ok(self.record(y, Op::AddBias { x, b }, &[x, b]))
    }

    /// `x·W + b` over the last axis of `x`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, m) = self.value(w).rows_cols()?;
        if shape.last() != Some(&n) {
            return Err(Error::shape("dense", &shape, self.shape(w)));
        }
        let rows = self.value(x).len() / n;
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, n])? };
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out = shape;
        *out.last_mut().unwrap() = m;
        self.reshape(y, &out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.record(y, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(y, Op::Mul { a, b }, &[a, b]))
    }

    /// `x[h,w,c] · s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, _, c) = self.value(x).hwc()?;
        if self.shape(s) != [c] {
            return Err(Error::shape("scale_channels", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut y = self.value(x).clone();
        for px in y.data_mut().chunks_mut(c) {
            for (v, k) in px.iter_mut().zip(sv) {
                *v *= k;
            }
        }
        Ok(self.record(y, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// `x[h,w,c] · m[h,w,0]`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if self.shape(m) != [h, w, 1] {
            return Err(Error::shape("scale_spatial", self.shape(x), self.shape(m)));
        }
        let mv = self.value(m).data();
        let mut y = self.value(x).clone();
        for (px, k) in y.data_mut().chunks_mut(c).zip(mv) {
            px.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.record(y, Op::ScaleSpatial { x, m }, &[x, m]))
    }

    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (y, index) = ops::global_pool_indexed(self.value(x), mode)?;
        Ok(self.record(y, Op::GlobalPool { x, mode, index }, &[x]))
    }

    pub fn spatial_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (y, index) = ops::spatial_pool_indexed(self.value(x), mode)?;
        Ok(self.record(y, Op::SpatialPool { x, mode, index }, &[x]))
    }

    /// Concatenates `H×W×Ci` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::Empty("concat_channels"))?);
        let (h, w, _) = first.hwc()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.value(p).hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("concat_channels", first.shape(), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[px * c..][..c]);
            }
        }
        let y = Tensor::new(vec![h, w, total], out)?;
        Ok(self.record(y, Op::ConcatChannels { parts: parts.to_vec() }, parts))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = ops::activation(self.value(x), kind);
        let op = match kind {
            Activation::Relu => Op::Relu { x },
            Activation::Sigmoid => Op::Sigmoid { x },
        };
        self.record(y, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax(self.value(x))?;
        Ok(self.record(y, Op::Softmax { x }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        let (y, xhat, rstd) =
            ops::layer_norm_stats(self.value(x), self.value(gamma), self.value(beta), epsilon)?;
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        Ok(self.record(y, op, &[x, gamma, beta]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose(self.value(x))?;
        Ok(self.record(y, Op::Transpose { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.record(y, Op::Reshape { x }, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.record(y, Op::Scale { x, c }, &[x])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(alloc::format!(
                "slice_cols {start}..{} of {c} columns",
                start + len
            )));
        }
        let d = self.value(x).data();
        let out = (0..r).flat_map(|i| d[i * c + start..][..len].iter().copied()).collect();
        let y = Tensor::new(vec![r, len], out)?;
        Ok(self.record(y, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (r, _) = self.value(first).rows_cols()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).rows_cols()?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..][..c]);
            }
        }
        let y = Tensor::new(vec![r, total], out)?;
        Ok(self.record(y, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Mean over the rows of an `n×D` matrix -> `D`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols()?;
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.record(Tensor::new(vec![c], out)?, Op::MeanRows { x }, &[x]))
    }

    pub fn avg_pool_down(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::avg_pool_down(self.value(x), factor)?;
        Ok(self.record(y, Op::AvgPoolDown { x, factor }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `-ln(max(p[label], floor))` for a probability vector `p`.
    pub fn nll(&mut self, p: Var, label: usize, floor: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.rank() != 1 {
            return Err(Error::invalid("nll expects a probability vector"));
        }
        let q = *pv.data().get(label).ok_or(Error::LabelOutOfRange(label))?;
        let y = Tensor::scalar(-libm::log(q.max(floor)));
        Ok(self.record(y, Op::Nll { p, label, floor }, &[p]))
    }

    /// Hash of every branch decision on the tape: ReLU input signs and max
    /// pooling winners. Two evaluations with equal signatures lie on the same
    /// smooth piece of the function, so a finite-difference stencil whose ends
    /// disagree straddles a kink.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        feed((*v > 0.0) as u64);
                    }
                }
                Op::GlobalPool { index, .. } | Op::SpatialPool { index, .. } => {
                    index.iter().for_each(|&i| feed(i as u64));
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a scalar `loss`. Every trainable leaf gets a gradient,
    /// zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(g.unwrap_or_else(|| Tensor::zeros(n.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            n_params: self.n_params,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &*self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, spec } => {
                let (gx, gk, gb) =
                    ops::conv2d_backward(self.value(*x), self.value(*k), *spec, g, self.wants(*x))?;
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *k, gk);
                if let Some(b) = b {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMul { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, ops::matmul_nt(g, self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![m], gb)?);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, vb, |g, y| g * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, va, |g, x| g * x));
                }
            }
            Op::ScaleChannels { x, s } => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let c = vs.len();
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for px in gx.data_mut().chunks_mut(c) {
                        for (v, k) in px.iter_mut().zip(vs.data()) {
                            *v *= k;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*s) {
                    let mut gs = vec![0.0; c];
                    for (gp, xp) in g.data().chunks(c).zip(vx.data().chunks(c)) {
                        for ((acc, gv), xv) in gs.iter_mut().zip(gp).zip(xp) {
                            *acc += gv * xv;
                        }
                    }
                    self.accumulate(grads, *s, Tensor::new(vec![c], gs)?);
                }
            }
            Op::ScaleSpatial { x, m } => {
                let (vx, vm) = (self.value(*x), self.value(*m));
                let c = vx.shape()[2];
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (px, k) in gx.data_mut().chunks_mut(c).zip(vm.data()) {
                        px.iter_mut().for_each(|v| *v *= k);
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*m) {
                    let gm = g
                        .data()
                        .chunks(c)
                        .zip(vx.data().chunks(c))
                        .map(|(gp, xp)| ops::dot(gp, xp))
                        .collect();
                    self.accumulate(grads, *m, Tensor::new(vm.shape().to_vec(), gm)?);
                }
            }
            Op::GlobalPool { x, mode, index } => {
                let vx = self.value(*x);
                let c = g.len();
                let mut gx = Tensor::zeros(vx.shape());
                match mode {
                    PoolMode::Avg => {
                        let inv = 1.0 / (vx.len() / c) as f64;
                        for px in gx.data_mut().chunks_mut(c) {
                            for (v, gv) in px.iter_mut().zip(g.data()) {
                                *v = gv * inv;
                            }
                        }
                    }
                    PoolMode::Max => {
                        for (&idx, gv) in index.iter().zip(g.data()) {
                            gx.data_mut()[idx] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SpatialPool { x, mode, index } => {
                let vx = self.value(*x);
                let c = vx.shape()[2];
                let mut gx = Tensor::zeros(vx.shape());
                match mode {
                    PoolMode::Avg => {
                        let inv = 1.0 / c as f64;
                        for (px, gv) in gx.data_mut().chunks_mut(c).zip(g.data()) {
                            px.iter_mut().for_each(|v| *v = gv * inv);
                        }
                    }
                    PoolMode::Max => {
                        for (&idx, gv) in index.iter().zip(g.data()) {
                            gx.data_mut()[idx] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatChannels { parts } => {
                let total = out.shape()[2];
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let c = shape[2];
                    if self.wants(p) {
                        let data = g
                            .data()
                            .chunks(total)
                            .flat_map(|px| px[offset..offset + c].iter().copied())
                            .collect();
                        self.accumulate(grads, p, Tensor::new(shape, data)?);
                    }
                    offset += c;
                }
            }
            Op::Relu { x } => {
                let gx = zip_map(g, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid { x } => {
                self.accumulate(grads, *x, zip_map(g, out, |g, y| g * y * (1.0 - y)));
            }
            Op::Softmax { x } => {
                let n = *out.shape().last().unwrap();
                let mut gx = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let s = ops::dot(yr, gr);
                    gx.extend(yr.iter().zip(gr).map(|(y, gv)| y * (gv - s)));
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = *out.shape().last().unwrap();
                let gm = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(out.len());
                    for ((gr, zr), r) in g.data().chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let dz: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_dz = dz.iter().sum::<f64>() / n as f64;
                        let mean_dzz = ops::dot(&dz, zr) / n as f64;
                        gx.extend(
                            dz.iter()
                                .zip(zr)
                                .map(|(d, z)| r * (d - mean_dz - z * mean_dzz)),
                        );
                    }
                    self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
                }
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for (gr, zr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += gr[j] * zr[j];
                        gb[j] += gr[j];
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![n], gg)?);
                self.accumulate(grads, *beta, Tensor::new(vec![n], gb)?);
            }
            Op::Transpose { x } => {
                self.accumulate(grads, *x, ops::transpose(g)?);
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).rows_cols()?;
                let len = out.shape()[1];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..][..len].copy_from_slice(&g.data()[i * len..][..len]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], gx)?);
            }
            Op::ConcatCols { parts } => {
                let (r, total) = out.rows_cols()?;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let data = (0..r)
                            .flat_map(|i| g.data()[i * total + offset..][..c].iter().copied())
                            .collect();
                        self.accumulate(grads, p, Tensor::new(vec![r, c], data)?);
                    }
                    offset += c;
                }
            }
            Op::MeanRows { x } => {
                let (r, c) = self.value(*x).rows_cols()?;
                let inv = 1.0 / r as f64;
                let data = (0..r * c).map(|i| g.data()[i % c] * inv).collect();
                self.accumulate(grads, *x, Tensor::new(vec![r, c], data)?);
            }
            Op::AvgPoolDown { x, factor } => {
                let (h, w, c) = self.value(*x).hwc()?;
                let ow = w / factor;
                let inv = 1.0 / (factor * factor) as f64;
                let mut gx = vec![0.0; h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let src = &g.data()[((y / factor) * ow + xx / factor) * c..][..c];
                        for (d, s) in gx[(y * w + xx) * c..][..c].iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![h, w, c], gx)?);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Nll { p, label, floor } => {
                let pv = self.value(*p);
                let q = pv.data()[*label];
                let mut gp = Tensor::zeros(pv.shape());
                if q > *floor {
                    gp.data_mut()[*label] = -g.data()[0] / q;
                }
                self.accumulate(grads, *p, gp);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    n_params: usize,
}

impl Gradients {
    /// Gradient w.r.t. a trainable leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for the tape's [`ParamSet`], in parameter order.
    pub fn into_param_grads(self) -> Vec<Tensor> {
        self.grads
            .into_iter()
            .take(self.n_params)
            .map(|g| g.expect("parameter leaves always receive a gradient"))
            .collect()
    }
}

/// Central-difference gradient of `f` at `p`, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, p: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = p.clone();
    let mut out = Tensor::zeros(p.shape());
    for i in 0..p.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Relative error used by gradient checks: `|a-b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks tape gradients of `build(tape, leaf)` against central
    /// differences for every coordinate of `p`.
    pub fn check_grad(
        p: &Tensor,
        build: impl Fn(&mut Tape<'_>, Var) -> Result<Var>,
    ) -> f64 {
        let mut tape = Tape::new();
        let v = tape.variable(p.clone());
        let loss = build(&mut tape, v).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(v).unwrap().clone();
        let numeric = finite_diff_grad(
            |q| {
                let mut t = Tape::new();
                let v = t.variable(q.clone());
                let l = build(&mut t, v).unwrap();
                t.value(l).data()[0]
            },
            p,
            1e-4,
        );
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n, 1e-3))
            .fold(0.0, f64::max)
    }
}

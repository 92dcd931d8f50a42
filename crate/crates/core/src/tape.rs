//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass as a node in
//! creation order, which is always a valid topological order. [`Tape::backward`]
//! walks the nodes once in reverse and accumulates vector-Jacobian products in
//! that fixed order, so gradients are bit-reproducible for an identical tape.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, BinaryOp, ConvGeometry, Reduce};
use crate::tensor::{numel, DType, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { op: BinaryOp, a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Matmul { a: Var, b: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    BroadcastTo { x: Var },
    Gather { x: Var, indices: Vec<usize> },
    Reduce { x: Var, axis: usize, kind: Reduce },
    SumAll { x: Var },
    Softmax { x: Var, axis: usize },
    Gelu { x: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geo: ConvGeometry },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, batch_stats: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::NotOnTape);
        }
        self.nodes.get(v.index()).ok_or(Error::NotOnTape)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, idx }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    /// Registers a leaf; gradients are collected iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Registers a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    /// Gradient stored on a leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        Ok(self.node(v)?.value.grad())
    }

    // -- elementwise --------------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out = ops::binary(op, self.value(a)?, self.value(b)?)?;
        Ok(self.record(out, Op::Binary { op, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = ops::scale(self.value(x)?, c)?;
        Ok(self.record(out, Op::Scale { x, c }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x)?)?;
        Ok(self.record(out, Op::Gelu { x }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x)?, axis)?;
        Ok(self.record(out, Op::Softmax { x, axis }, &[x]))
    }

    // -- linear algebra and shape --------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a)?, self.value(b)?)?;
        Ok(self.record(out, Op::Matmul { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = ops::reshape(self.value(x)?, shape)?;
        Ok(self.record(out, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x)?, perm)?;
        Ok(self.record(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Alias of [`Tape::permute`].
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.permute(x, perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals = xs.iter().map(|&v| self.value(v)).collect::<Result<Vec<_>>>()?;
        let out = ops::concat(&vals, axis)?;
        Ok(self.record(out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice(self.value(x)?, axis, start, len)?;
        Ok(self.record(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = ops::broadcast_to(self.value(x)?, shape)?;
        Ok(self.record(out, Op::BroadcastTo { x }, &[x]))
    }

    pub fn gather_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = ops::gather_last(self.value(x)?, indices)?;
        Ok(self.record(out, Op::Gather { x, indices: indices.to_vec() }, &[x]))
    }

    // -- reductions -----------------------------------------------------------

    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let out = ops::reduce(self.value(x)?, axis, kind)?;
        Ok(self.record(out, Op::Reduce { x, axis, kind }, &[x]))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduce::Sum)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduce::Mean)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = ops::sum_all(self.value(x)?)?;
        Ok(self.record(out, Op::SumAll { x }, &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    // -- convolution and normalization -----------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xv = self.value(x)?;
        let wv = self.value(w)?;
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), stride, pad, groups)?;
        let bv = bias.map(|b| self.value(b)).transpose()?;
        let out = ops::conv2d(xv, wv, bv, stride, pad, groups)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.record(out, Op::Conv2d { x, w, bias, geo }, &inputs))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let shape = self.shape(x)?;
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "depthwise conv expects [B, C, H, W]".into(),
            });
        }
        let c = shape[1];
        self.conv2d(x, w, bias, stride, pad, c)
    }

    /// LayerNorm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = ops::layer_norm(self.value(x)?, self.value(gamma)?, self.value(beta)?, eps)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: cache.xhat,
            rstd: cache.rstd,
        };
        Ok(self.record(out, op, &[x, gamma, beta]))
    }

    /// Batch norm with statistics from the current batch (over every axis but 1).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (out, cache) = ops::batch_norm_train(self.value(x)?, self.value(gamma)?, self.value(beta)?, eps)?;
        let stats = BatchStats {
            mean: cache.mean,
            var: cache.var,
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: cache.xhat,
            rstd: cache.rstd,
            batch_stats: true,
        };
        Ok((self.record(out, op, &[x, gamma, beta]), stats))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x)?;
        let (out, rstd) =
            ops::batch_norm_eval(xv, self.value(gamma)?, self.value(beta)?, running_mean, running_var, eps)?;
        let c = xv.shape()[1];
        let s = numel(&xv.shape()[2..]);
        let xhat = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / s) % c;
                (v - running_mean[ch]) * rstd[ch]
            })
            .collect();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            batch_stats: false,
        };
        Ok(self.record(out, op, &[x, gamma, beta]))
    }

    // -- backward -------------------------------------------------------------

    /// Populates `grad` on every `requires_grad` leaf with d(loss)/d(leaf).
    /// Leaves the loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lnode = self.node(loss)?;
        if lnode.value.numel() != 1 {
            return Err(Error::NonScalarLoss(lnode.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![1.0]);
        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        let i = v.index();
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out_shape = self.nodes[i].value.shape();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary { op, a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    BinaryOp::Mul => {
                        let bo = ops::broadcast_offsets(out_shape, bv.shape());
                        let ao = ops::broadcast_offsets(out_shape, av.shape());
                        let ga = g.iter().zip(&bo).map(|(gv, &j)| gv * bv.data()[j]).collect();
                        let gb = g.iter().zip(&ao).map(|(gv, &j)| gv * av.data()[j]).collect();
                        (ga, gb)
                    }
                };
                let ga = ops::sum_to_shape(&ga, out_shape, av.shape());
                let gb = ops::sum_to_shape(&gb, out_shape, bv.shape());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.nodes[a.index()].needs_grad {
                    let (bts, bt) = ops::transpose_last_raw(bv.data(), bv.shape());
                    let (s, ga) = ops::matmul_raw(g, out_shape, &bt, &bts)?;
                    self.accumulate(grads, *a, ops::sum_to_shape(&ga, &s, av.shape()));
                }
                if self.nodes[b.index()].needs_grad {
                    let (ats, at) = ops::transpose_last_raw(av.data(), av.shape());
                    let (s, gb) = ops::matmul_raw(&at, &ats, g, out_shape)?;
                    self.accumulate(grads, *b, ops::sum_to_shape(&gb, &s, bv.shape()));
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let inv = ops::inverse_perm(perm);
                let (_, gx) = ops::permute_raw(g, out_shape, &inv);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = ops::split_axis(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let ext = self.val(x).shape()[*axis];
                    let mut gx = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    self.accumulate(grads, x, gx);
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.val(*x).shape();
                let (outer, ext, inner) = ops::split_axis(in_shape, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![0.0; numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BroadcastTo { x } => {
                let gx = ops::sum_to_shape(g, out_shape, self.val(*x).shape());
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, indices } => {
                let in_shape = self.val(*x).shape();
                let last = *in_shape.last().expect("gather input has rank >= 1");
                let mut gx = vec![0.0; numel(in_shape)];
                for (o, row) in g.chunks(indices.len()).enumerate() {
                    for (gv, &j) in row.iter().zip(indices) {
                        gx[o * last + j] += gv;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reduce { x, axis, kind } => {
                let in_shape = self.val(*x).shape();
                let (outer, n, inner) = ops::split_axis(in_shape, *axis);
                let f = match kind {
                    Reduce::Sum => 1.0,
                    Reduce::Mean => 1.0 / n as f64,
                };
                let mut gx = vec![0.0; numel(in_shape)];
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            gx[(o * n + j) * inner + k] = g[o * inner + k] * f;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll { x } => {
                let n = self.val(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                self.accumulate(grads, *x, ops::softmax_backward(y, g, out_shape, *axis));
            }
            Op::Gelu { x } => {
                let xv = self.val(*x).data();
                let gx = g.iter().zip(xv).map(|(gv, &v)| gv * ops::gelu_grad_scalar(v)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, bias, geo } => {
                let want = (
                    self.nodes[x.index()].needs_grad,
                    self.nodes[w.index()].needs_grad,
                    bias.is_some_and(|b| self.nodes[b.index()].needs_grad),
                );
                let cg = ops::conv2d_backward(geo, self.val(*x).data(), self.val(*w).data(), g, want);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.val(*gamma).data();
                let c = gam.len();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * c..(r + 1) * c;
                    let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        gx[r * c + j] = rs * (gr[j] * gam[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats } => {
                let gam = self.val(*gamma).data();
                let c = gam.len();
                let s = numel(&out_shape[2..]);
                let b = out_shape[0];
                let n = (b * s) as f64;
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let idx = || (0..b).flat_map(move |bi| (bi * c + ch) * s..(bi * c + ch + 1) * s);
                    let (mut sd, mut sdx) = (0.0, 0.0);
                    for k in idx() {
                        sd += g[k];
                        sdx += g[k] * xhat[k];
                    }
                    gg[ch] = sdx;
                    gb[ch] = sd;
                    let scale = gam[ch] * rstd[ch];
                    if *batch_stats {
                        let (md, mdx) = (sd / n, sdx / n);
                        for k in idx() {
                            gx[k] = scale * (g[k] - md - xhat[k] * mdx);
                        }
                    } else {
                        for k in idx() {
                            gx[k] = scale * g[k];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
        }
        Ok(())
    }
}

/// Convenience for tests and small scripts: a float64 leaf from raw parts.
pub fn f64_leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
    let t = Tensor::new(shape.to_vec(), data, DType::F64)?.with_requires_grad(requires_grad);
    Ok(tape.leaf(t))
}

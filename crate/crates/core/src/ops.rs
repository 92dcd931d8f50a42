//! Forward kernels over [`Tensor`] values, plus the raw gradient kernels the
//! tape uses for the non-trivial ops. Nothing here records history; see
//! [`crate::tape`] for differentiation.

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, DType, Tensor};

fn same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<DType> {
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch { op });
    }
    Ok(a.dtype())
}

fn finish(op: &'static str, shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Result<Tensor> {
    dtype.round_slice(&mut data);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(Tensor::from_parts(shape, data, dtype))
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// Broadcasting

/// Right-aligned broadcast of two shapes; extent-1 axes stretch.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape` (row-major), the flat offset of the
/// element of `src_shape` it reads from under broadcasting.
pub(crate) fn broadcast_offsets(out_shape: &[usize], src_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let src_strides = strides(src_shape);
    let pad = rank - src_shape.len();
    let mut eff = vec![0usize; rank];
    for i in pad..rank {
        if src_shape[i - pad] != 1 {
            eff[i] = src_strides[i - pad];
        }
    }
    let n = numel(out_shape);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Sums `data` (laid out as `from`) down to the broadcast-compatible `to`.
pub(crate) fn sum_to_shape(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let mut out = vec![0.0; numel(to)];
    for (v, off) in data.iter().zip(broadcast_offsets(from, to)) {
        out[off] += v;
    }
    out
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    match broadcast_shape(x.shape(), shape) {
        Some(s) if s == shape => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            })
        }
    }
    let src = x.data();
    let data = broadcast_offsets(shape, x.shape()).into_iter().map(|o| src[o]).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data, x.dtype()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dtype = same_dtype(op.name(), a, b)?;
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect()
    } else {
        let oa = broadcast_offsets(&shape, a.shape());
        let ob = broadcast_offsets(&shape, b.shape());
        oa.iter().zip(&ob).map(|(&i, &j)| op.apply(ad[i], bd[j])).collect()
    };
    finish(op.name(), shape, data, dtype)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Mul, a, b)
}

pub fn scale(x: &Tensor, c: f64) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v * c).collect();
    finish("scale", x.shape().to_vec(), data, x.dtype())
}

// ---------------------------------------------------------------------------
// Matrix product

fn mm_accumulate(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`; batch
/// extents broadcast right-aligned.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dtype = same_dtype("matmul", a, b)?;
    let (shape, out) = matmul_raw(a.data(), a.shape(), b.data(), b.shape())?;
    finish("matmul", shape, out, dtype)
}

pub(crate) fn matmul_raw(
    ad: &[f64],
    a_shape: &[usize],
    bd: &[f64],
    b_shape: &[usize],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a_shape.to_vec(),
        rhs: b_shape.to_vec(),
    };
    let (ar, br) = (a_shape.len(), b_shape.len());
    if ar < 2 || br < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a_shape[ar - 2], a_shape[ar - 1]);
    let (k2, n) = (b_shape[br - 2], b_shape[br - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a_shape[..ar - 2];
    let b_batch = &b_shape[..br - 2];
    let batch = broadcast_shape(a_batch, b_batch).ok_or_else(mismatch)?;
    let nb = numel(&batch);
    let oa = broadcast_offsets(&batch, a_batch);
    let ob = broadcast_offsets(&batch, b_batch);
    let mut out = vec![0.0; nb * m * n];
    for bi in 0..nb {
        let ao = oa[bi] * m * k;
        let bo = ob[bi] * k * n;
        mm_accumulate(
            &ad[ao..ao + m * k],
            &bd[bo..bo + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = batch;
    shape.extend([m, n]);
    Ok((shape, out))
}

/// Swaps the last two axes.
pub fn transpose_last(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "transpose needs rank >= 2".into(),
        });
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    permute(x, &perm)
}

// ---------------------------------------------------------------------------
// Shape manipulation

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    x.reshaped(shape)
}

pub(crate) fn validate_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::InvalidShape {
            shape: perm.to_vec(),
            reason: format!("permutation must have length {rank}"),
        });
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::InvalidShape {
                shape: perm.to_vec(),
                reason: "not a permutation".into(),
            });
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    validate_perm(perm, x.rank())?;
    let (shape, data) = permute_raw(x.data(), x.shape(), perm);
    Ok(Tensor::from_parts(shape, data, x.dtype()))
}

pub(crate) fn permute_raw(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = src.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, data)
}

/// Swaps the last two axes of a raw buffer.
pub(crate) fn transpose_last_raw(src: &[f64], shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let r = shape.len();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    permute_raw(src, shape, &perm)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "concat of zero tensors".into(),
    })?;
    check_axis(axis, first.rank())?;
    let mut total = 0;
    for t in xs {
        same_dtype("concat", first, t)?;
        let ok = t.rank() == first.rank()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        total += t.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for t in xs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data, first.dtype()))
}

/// Narrows `axis` to `[start, start + len)`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    if len == 0 || start + len > x.shape()[axis] {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("slice [{start}, {}) out of range on axis {axis}", start + len),
        });
    }
    let (outer, ext, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * ext * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data, x.dtype()))
}

/// Selects along the last axis: `out[.., j] = x[.., indices[j]]`.
pub fn gather_last(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    if r == 0 || indices.is_empty() {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "gather needs rank >= 1 and at least one index".into(),
        });
    }
    let last = x.shape()[r - 1];
    if let Some(&bad) = indices.iter().find(|&&i| i >= last) {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("gather index {bad} out of range"),
        });
    }
    let outer = x.numel() / last;
    let mut data = Vec::with_capacity(outer * indices.len());
    for o in 0..outer {
        let row = &x.data()[o * last..(o + 1) * last];
        data.extend(indices.iter().map(|&i| row[i]));
    }
    let mut shape = x.shape().to_vec();
    shape[r - 1] = indices.len();
    Ok(Tensor::from_parts(shape, data, x.dtype()))
}

// ---------------------------------------------------------------------------
// Reductions

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

pub fn reduce(x: &Tensor, axis: usize, kind: Reduce) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let base = (o * n + j) * inner;
            for i in 0..inner {
                out[o * inner + i] += src[base + i];
            }
        }
    }
    if kind == Reduce::Mean {
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    finish("reduce", shape, out, x.dtype())
}

pub fn sum(x: &Tensor, axis: usize) -> Result<Tensor> {
    reduce(x, axis, Reduce::Sum)
}

pub fn mean(x: &Tensor, axis: usize) -> Result<Tensor> {
    reduce(x, axis, Reduce::Mean)
}

pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let s = x.data().iter().sum();
    finish("sum_all", Vec::new(), vec![s], x.dtype())
}

// ---------------------------------------------------------------------------
// Nonlinearities

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    finish("softmax", x.shape().to_vec(), out, x.dtype())
}

/// Softmax vector-Jacobian product: `dx = y * (dy - sum(dy * y))` per slice.
pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * gaussian_cdf(x)
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    gaussian_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    finish("gelu", x.shape().to_vec(), data, x.dtype())
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || stride == 0 || groups == 0 {
            return Err(mismatch());
        }
        let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        if cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(mismatch());
        }
        let out_extent = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            if padded < k {
                return Err(Error::InvalidShape {
                    shape: x.to_vec(),
                    reason: format!("non-positive conv output extent (size {size}, kernel {k}, pad {pad})"),
                });
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            oh: out_extent(h, kh)?,
            ow: out_extent(wd, kw)?,
        })
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Input coordinate for an output coordinate and kernel tap, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }

    /// Visits every (output, input, weight) flat-offset triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (cig, cog) = (self.cin_per_group(), self.cout_per_group());
        for b in 0..self.batch {
            for oc in 0..self.cout {
                let g = oc / cog;
                let out_base = (b * self.cout + oc) * self.oh * self.ow;
                for icg in 0..cig {
                    let ic = g * cig + icg;
                    let in_base = (b * self.cin + ic) * self.h * self.w;
                    let w_base = (oc * cig + icg) * self.kh * self.kw;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wi = w_base + ky * self.kw + kx;
                            for oy in 0..self.oh {
                                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                                for ox in 0..self.ow {
                                    let Some(ix) = self.src(ox, kx, self.w) else { continue };
                                    f(out_base + oy * self.ow + ox, in_base + iy * self.w + ix, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }
}

/// Grouped 2-D cross-correlation with zero padding.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let dtype = same_dtype("conv2d", x, w)?;
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad, groups)?;
    let mut out = vec![0.0; numel(&geo.out_shape())];
    let (xd, wd) = (x.data(), w.data());
    geo.for_each_tap(|o, i, k| out[o] += wd[k] * xd[i]);
    if let Some(b) = bias {
        same_dtype("conv2d", x, b)?;
        if b.shape() != [geo.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![geo.cout],
            });
        }
        let plane = geo.oh * geo.ow;
        for (chunk_idx, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[chunk_idx % geo.cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    finish("conv2d", geo.out_shape(), out, dtype)
}

/// Depthwise convolution: one `K x K` filter per channel, `w` is `[C, 1, K, K]`.
pub fn depthwise_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "depthwise conv expects [B, C, H, W]".into(),
        });
    }
    conv2d(x, w, bias, stride, pad, x.shape()[1])
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want: (bool, bool, bool),
) -> ConvGrads {
    let dx = want.0.then(|| {
        let mut dx = vec![0.0; x.len()];
        geo.for_each_tap(|o, i, k| dx[i] += w[k] * dy[o]);
        dx
    });
    let dw = want.1.then(|| {
        let mut dw = vec![0.0; w.len()];
        geo.for_each_tap(|o, i, k| dw[k] += x[i] * dy[o]);
        dw
    });
    let db = want.2.then(|| {
        let plane = geo.oh * geo.ow;
        let mut db = vec![0.0; geo.cout];
        for (chunk_idx, chunk) in dy.chunks(plane).enumerate() {
            db[chunk_idx % geo.cout] += chunk.iter().sum::<f64>();
        }
        db
    });
    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// Normalization

/// Normalized values and reciprocal std per group, kept for backward.
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// LayerNorm over the last axis.
pub(crate) fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let dtype = same_dtype("layer_norm", x, gamma)?;
    same_dtype("layer_norm", x, beta)?;
    let c = *x.shape().last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / c;
    let mut out = vec![0.0; x.numel()];
    let mut cache = NormCache {
        xhat: vec![0.0; x.numel()],
        rstd: vec![0.0; rows],
        mean: vec![0.0; rows],
        var: vec![0.0; rows],
    };
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            let xh = (row[j] - mean) * rstd;
            cache.xhat[r * c + j] = xh;
            out[r * c + j] = xh * g[j] + b[j];
        }
        cache.rstd[r] = rstd;
        cache.mean[r] = mean;
        cache.var[r] = var;
    }
    Ok((finish("layer_norm", x.shape().to_vec(), out, dtype)?, cache))
}

/// Batch statistics over every axis except 1 (channels).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "batch norm expects [B, C, ...]".into(),
        });
    }
    Ok((shape[0], shape[1], numel(&shape[2..])))
}

pub(crate) fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let dtype = same_dtype("batch_norm", x, gamma)?;
    same_dtype("batch_norm", x, beta)?;
    let (b, c, s) = channel_layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let n = (b * s) as f64;
    let xd = x.data();
    let at = |bi: usize, ch: usize| (bi * c + ch) * s;
    let mut cache = NormCache {
        xhat: vec![0.0; x.numel()],
        rstd: vec![0.0; c],
        mean: vec![0.0; c],
        var: vec![0.0; c],
    };
    let mut out = vec![0.0; x.numel()];
    for ch in 0..c {
        let mut total = 0.0;
        for bi in 0..b {
            total += xd[at(bi, ch)..at(bi, ch) + s].iter().sum::<f64>();
        }
        let mean = total / n;
        let mut sq = 0.0;
        for bi in 0..b {
            sq += xd[at(bi, ch)..at(bi, ch) + s].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        let var = sq / n;
        let rstd = 1.0 / (var + eps).sqrt();
        for bi in 0..b {
            for i in at(bi, ch)..at(bi, ch) + s {
                let xh = (xd[i] - mean) * rstd;
                cache.xhat[i] = xh;
                out[i] = xh * gamma.data()[ch] + beta.data()[ch];
            }
        }
        cache.mean[ch] = mean;
        cache.var[ch] = var;
        cache.rstd[ch] = rstd;
    }
    Ok((finish("batch_norm", x.shape().to_vec(), out, dtype)?, cache))
}

/// Inference-mode batch norm with fixed running statistics.
pub(crate) fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let dtype = same_dtype("batch_norm", x, gamma)?;
    let (b, c, s) = channel_layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            for i in base..base + s {
                out[i] = (x.data()[i] - running_mean[ch]) * rstd[ch] * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    Ok((finish("batch_norm", x.shape().to_vec(), out, dtype)?, rstd))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::f64(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero = Tensor::zeros(&[2, 2], DType::F64);
        assert_eq!(matmul(&a, &eye).unwrap().data(), a.data());
        assert_eq!(matmul(&a, &zero).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3], DType::F64);
        let b = Tensor::zeros(&[4, 2], DType::F64);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2, 2]), None);
        let x = t(&[2, 3], &[0.0; 6]);
        let y = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(add(&x, &y), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        assert!(matches!(softmax(&y, 1), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-5);
    }

    #[test]
    fn reductions() {
        let x = t(&[3], &[2.0, 4.0, 6.0]);
        assert_eq!(mean(&x, 0).unwrap().item(), 4.0);
        assert_eq!(sum(&Tensor::zeros(&[4], DType::F64), 0).unwrap().item(), 0.0);
        assert!(reduce(&x, 1, Reduce::Sum).is_err());
    }

    #[test]
    fn conv_output_extents() {
        let g = ConvGeometry::new(&[1, 3, 224, 224], &[8, 3, 3, 3], 2, 1, 1).unwrap();
        assert_eq!((g.oh, g.ow), (112, 112));
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 5, 5], 1, 0, 1).is_err());
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &w, None, 1, 0, 1).unwrap().data(), x.data());
        let x2 = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w2 = t(&[2, 1, 1, 1], &[1.0, 1.0]);
        assert_eq!(depthwise_conv2d(&x2, &w2, None, 1, 0).unwrap().data(), x2.data());
    }

    #[test]
    fn slice_concat_inverse() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = slice(&x, 1, 0, 1).unwrap();
        let b = slice(&x, 1, 1, 2).unwrap();
        assert_eq!(concat(&[&a, &b], 1).unwrap().data(), x.data());
        assert!(slice(&x, 1, 2, 2).is_err());
    }

    #[test]
    fn gather_selects_columns() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = gather_last(&x, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[3.0, 1.0, 3.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn nan_is_an_error() {
        let x = t(&[1], &[f64::MAX]);
        assert!(matches!(add(&x, &x), Err(Error::NonFinite { .. })));
    }
}

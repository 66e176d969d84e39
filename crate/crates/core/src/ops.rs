//! Numeric kernels over [`Tensor`]s, forward and backward.
//!
//! Feature maps are `H×W×C` (channels fastest), convolution kernels are
//! `Kh×Kw×Cin×Cout`, matrices are row-major. Everything here is a pure
//! function; [`crate::tape`] records these kernels for reverse mode.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; any odd leftover pad
    /// goes on the bottom/right.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub const fn same() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub const fn strided(stride: usize) -> Self {
        ConvSpec {
            stride,
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub const fn dilated(dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            padding: Padding::Same,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    pub(crate) oh: usize,
    pub(crate) ow: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
    dilation: usize,
}

impl ConvGeom {
    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn out_extent(len: usize, eff: usize, spec: &ConvSpec) -> Option<(usize, usize)> {
    match spec.padding {
        Padding::Same => {
            let out = len.div_ceil(spec.stride);
            let needed = (out - 1) * spec.stride + eff;
            let pad = needed.saturating_sub(len);
            Some((out, pad / 2))
        }
        Padding::Valid => (eff <= len).then(|| ((len - eff) / spec.stride + 1, 0)),
    }
}

pub(crate) fn conv_geometry(input: &[usize], kernel: &[usize], spec: &ConvSpec) -> Result<ConvGeom> {
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::invalid("conv2d: stride and dilation must be >= 1"));
    }
    let (h, w, cin) = match *input {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape("conv2d input (H×W×C)", input, kernel)),
    };
    let (kh, kw, kcin, cout) = match *kernel {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv2d kernel (Kh×Kw×Cin×Cout)", input, kernel)),
    };
    if kcin != cin {
        return Err(Error::shape("conv2d channels", input, kernel));
    }
    let eff_h = (kh - 1) * spec.dilation + 1;
    let eff_w = (kw - 1) * spec.dilation + 1;
    let (oh, pad_top) = out_extent(h, eff_h, spec)
        .ok_or_else(|| Error::shape("conv2d valid window", input, kernel))?;
    let (ow, pad_left) = out_extent(w, eff_w, spec)
        .ok_or_else(|| Error::shape("conv2d valid window", input, kernel))?;
    Ok(ConvGeom {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
        pad_top,
        pad_left,
        stride: spec.stride,
        dilation: spec.dilation,
    })
}

/// 2-D convolution (cross-correlation) with stride, dilation and padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), kernel.shape(), &spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), kernel.shape()));
        }
    }
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else {
                        continue;
                    };
                    let px = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let taps = &k[(ky * g.kw + kx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &taps[ci * g.cout..][..g.cout];
                        for (acc, &kv) in o.iter_mut().zip(row) {
                            *acc += v * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.cout], out)
}

/// Gradients of [`conv2d`] w.r.t. input (when requested), kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    spec: ConvSpec,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = conv_geometry(input.shape(), kernel.shape(), &spec)?;
    if grad_out.shape() != [g.oh, g.ow, g.cout] {
        return Err(Error::shape("conv2d grad", grad_out.shape(), &[g.oh, g.ow, g.cout]));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &go[(oy * g.ow + ox) * g.cout..][..g.cout];
            for (b, &dv) in gb.iter_mut().zip(d) {
                *b += dv;
            }
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else {
                        continue;
                    };
                    let base = (iy * g.w + ix) * g.cin;
                    let tap = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = x[base + ci];
                        let krow = &k[tap + ci * g.cout..][..g.cout];
                        if let Some(gx) = gx.as_mut() {
                            gx[base + ci] += dot(krow, d);
                        }
                        if v != 0.0 {
                            let gkrow = &mut gk[tap + ci * g.cout..][..g.cout];
                            for (acc, &dv) in gkrow.iter_mut().zip(d) {
                                *acc += v * dv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        gx.map(|gx| Tensor::new(input.shape().to_vec(), gx)).transpose()?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.cout], gb)?,
    ))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a [p,n] · b [n,m] -> [p,m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, n) = a.rows_cols()?;
    let (n2, m) = b.rows_cols()?;
    if n != n2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; p * m];
    for i in 0..p {
        let o = &mut out[i * m..][..m];
        for (l, &av) in ad[i * n..][..n].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (acc, &bv) in o.iter_mut().zip(&bd[l * m..][..m]) {
                *acc += av * bv;
            }
        }
    }
    Tensor::new(vec![p, m], out)
}

/// `a [p,m] · bᵀ` for `b [n,m]` -> `[p,n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, m) = a.rows_cols()?;
    let (n, m2) = b.rows_cols()?;
    if m != m2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let out = (0..p * n)
        .map(|idx| dot(&ad[(idx / n) * m..][..m], &bd[(idx % n) * m..][..m]))
        .collect();
    Tensor::new(vec![p, n], out)
}

/// `aᵀ · b` for `a [p,n]`, `b [p,m]` -> `[n,m]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, n) = a.rows_cols()?;
    let (p2, m) = b.rows_cols()?;
    if p != p2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for r in 0..p {
        let brow = &bd[r * m..][..m];
        for (l, &av) in ad[r * n..][..n].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (acc, &bv) in out[l * m..][..m].iter_mut().zip(brow) {
                *acc += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.rows_cols()?;
    let d = a.data();
    Tensor::new(vec![c, r], (0..r * c).map(|i| d[(i % r) * c + i / r]).collect())
}

/// Fully connected layer over the last axis: `out[.., j] = Σ_i in[.., i]·w[i][j] + b[j]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, m) = weight.rows_cols()?;
    let last = *input.shape().last().ok_or(Error::Empty("dense input"))?;
    if last != n || bias.shape() != [m] {
        return Err(Error::shape("dense", input.shape(), weight.shape()));
    }
    let rows = input.len() / n;
    let flat = input.clone().reshape(&[rows, n])?;
    let mut out = matmul(&flat, weight)?;
    add_bias_in_place(&mut out, bias);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    out.reshape(&shape)
}

pub(crate) fn add_bias_in_place(x: &mut Tensor, bias: &Tensor) {
    let m = bias.len();
    for row in x.data_mut().chunks_mut(m) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

/// Per-channel mean or max over all spatial positions: `H×W×C -> C`.
pub fn global_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    global_pool_indexed(input, mode).map(|(t, _)| t)
}

/// Like [`global_pool`]; for `Max` also returns the winning flat index per channel.
pub(crate) fn global_pool_indexed(input: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = input.hwc()?;
    let x = input.data();
    let hw = h * w;
    match mode {
        PoolMode::Avg => {
            let mut sums = vec![0.0; c];
            for px in x.chunks(c) {
                for (s, v) in sums.iter_mut().zip(px) {
                    *s += v;
                }
            }
            let inv = 1.0 / hw as f64;
            sums.iter_mut().for_each(|s| *s *= inv);
            Ok((Tensor::new(vec![c], sums)?, Vec::new()))
        }
        PoolMode::Max => {
            let mut best: Vec<usize> = (0..c).collect();
            for (p, px) in x.chunks(c).enumerate().skip(1) {
                for (ch, &v) in px.iter().enumerate() {
                    if v > x[best[ch]] {
                        best[ch] = p * c + ch;
                    }
                }
            }
            let vals = best.iter().map(|&i| x[i]).collect();
            Ok((Tensor::new(vec![c], vals)?, best))
        }
    }
}

/// Per-pixel mean or max across channels: `H×W×C -> H×W×1`.
pub fn spatial_pool_over_channels(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    spatial_pool_indexed(input, mode).map(|(t, _)| t)
}

pub(crate) fn spatial_pool_indexed(input: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = input.hwc()?;
    let x = input.data();
    let mut idx = Vec::new();
    let vals: Vec<f64> = match mode {
        PoolMode::Avg => x.chunks(c).map(|px| px.iter().sum::<f64>() / c as f64).collect(),
        PoolMode::Max => {
            idx.reserve(h * w);
            x.chunks(c)
                .enumerate()
                .map(|(p, px)| {
                    let mut best = 0;
                    for (ch, &v) in px.iter().enumerate() {
                        if v > px[best] {
                            best = ch;
                        }
                    }
                    idx.push(p * c + best);
                    px[best]
                })
                .collect()
        }
    };
    Ok((Tensor::new(vec![h, w, 1], vals)?, idx))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let n = *input.shape().last().ok_or(Error::Empty("softmax"))?;
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Layer normalization over the last axis (population variance).
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, epsilon: f64) -> Result<Tensor> {
    layer_norm_stats(input, gamma, beta, epsilon).map(|(y, _, _)| y)
}

/// Returns `(output, normalized input, 1/std per slice)`.
pub(crate) fn layer_norm_stats(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let n = *input.shape().last().ok_or(Error::Empty("layer_norm"))?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::shape("layer_norm", input.shape(), gamma.shape()));
    }
    if epsilon < 0.0 {
        return Err(Error::invalid("layer_norm: epsilon must be non-negative"));
    }
    let mut xhat = Vec::with_capacity(input.len());
    let mut rstd = Vec::with_capacity(input.len() / n);
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let denom = var + epsilon;
        // A constant slice with epsilon = 0 normalizes to zero rather than NaN.
        let r = if denom > 0.0 { 1.0 / libm::sqrt(denom) } else { 0.0 };
        rstd.push(r);
        for (i, v) in row.iter().enumerate() {
            let z = (v - mean) * r;
            xhat.push(z);
            out.push(z * gamma.data()[i] + beta.data()[i]);
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, xhat, rstd))
}

/// Non-overlapping average pooling by an integer factor: `H×W×C -> H/f×W/f×C`.
pub fn avg_pool_down(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "avg_pool_down: {h}×{w} not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let x = input.data();
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[((y / factor) * ow + xx / factor) * c..][..c];
            for (acc, v) in o.iter_mut().zip(&x[(y * w + xx) * c..][..c]) {
                *acc += v;
            }
        }
    }
    let inv = 1.0 / (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![oh, ow, c], out)
}

//! Attention, fusion and transformer blocks recorded on a [`Tape`].
//!
//! Parameter records hold [`ParamId`]s into a [`ParamSet`]; the `*_forward`
//! functions are inference-only conveniences that build a throwaway tape.

use alloc::vec::Vec;

use libm::sqrt;

use crate::error::{Error, Result};
use crate::ops::{ConvSpec, PoolMode};
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl ConvParams {
    pub fn apply(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (k, b) = (t.param(self.kernel), t.param(self.bias));
        t.conv2d(x, k, Some(b), self.spec)
    }
}

/// Row-vector dense layer, weight `in×out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseParams {
    pub fn apply(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (t.param(self.weight), t.param(self.bias));
        t.dense(x, w, b)
    }

    fn input_width(&self, t: &Tape<'_>) -> usize {
        t.shape(t.param(self.weight))[0]
    }
}

/// Channel squeeze-excitation plus a spatial map from pooled channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeBlockParams {
    /// `C × C/r`
    pub fc1: DenseParams,
    /// `C/r × C`
    pub fc2: DenseParams,
    /// `k×k×2×1` over `[avg ‖ max]`.
    pub spatial: ConvParams,
    pub reduction: usize,
}

/// CBAM-style channel attention with one shared MLP over both pooled
/// descriptors and a dilated spatial convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CbamParams {
    /// `W₁`, `C × C/r`, applied to both the average and max descriptors.
    pub w1: DenseParams,
    /// `W₀`, `C/r × C`, applied once to the summed hidden activations.
    pub w0: DenseParams,
    /// `k×k×2×1`, dilated.
    pub spatial: ConvParams,
    pub dilation: usize,
}

/// Projections for the token-axis compression used by linear attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceProjection {
    /// `n × r` applied to keys.
    pub e: ParamId,
    /// `n × r` applied to values.
    pub f: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub projection: Option<SequenceProjection>,
}

impl AttentionParams {
    /// Checks that the `D×D` projections split evenly into `heads`.
    pub fn new(
        params: &ParamSet,
        [wq, wk, wv, wo]: [ParamId; 4],
        heads: usize,
        projection: Option<SequenceProjection>,
    ) -> Result<Self> {
        let d = params.get(wq).shape()[0];
        for id in [wq, wk, wv, wo] {
            if params.get(id).shape() != [d, d] {
                return Err(Error::shape("attention projection", &[d, d], params.get(id).shape()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(alloc::format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        if let Some(p) = projection {
            let (ps, fs) = (params.get(p.e).shape(), params.get(p.f).shape());
            if ps.len() != 2 || ps != fs || ps[1] > ps[0] {
                return Err(Error::shape("sequence projection", ps, fs));
            }
        }
        Ok(AttentionParams {
            wq,
            wk,
            wv,
            wo,
            heads,
            projection,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerBlockParams {
    pub attention: AttentionParams,
    pub ffn1: DenseParams,
    pub ffn2: DenseParams,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

/// 1×1 projections bringing the three pyramid levels to a common width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlffParams {
    pub proj_l: ConvParams,
    pub proj_m: ConvParams,
    pub proj_h: ConvParams,
}

/// Low/mid/high backbone feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub low: Tensor,
    pub mid: Tensor,
    pub high: Tensor,
}

/// Tape handles for a [`FeaturePyramid`].
#[derive(Debug, Clone, Copy)]
pub struct PyramidVars {
    pub low: Var,
    pub mid: Var,
    pub high: Var,
}

fn channels(t: &Tape<'_>, x: Var) -> Result<usize> {
    Ok(t.value(x).hwc()?.2)
}

/// `X' = X · s · M_spatial` with `s = σ(W₂ δ(W₁ GAP(X)))` and
/// `M_spatial = σ(conv([avg_c(X); max_c(X)]))`.
pub fn dat_se(t: &mut Tape<'_>, x: Var, p: &SeBlockParams) -> Result<Var> {
    let c = channels(t, x)?;
    if p.fc1.input_width(t) != c {
        return Err(Error::shape("dat_se channels", t.shape(x), t.shape(t.param(p.fc1.weight))));
    }
    let z = t.global_pool(x, PoolMode::Avg)?;
    let hidden = p.fc1.apply(t, z)?;
    let hidden = t.relu(hidden);
    let s = p.fc2.apply(t, hidden)?;
    let s = t.sigmoid(s);

    let m = spatial_map(t, x, &p.spatial)?;
    let y = t.scale_channels(x, s)?;
    t.scale_spatial(y, m)
}

fn spatial_map(t: &mut Tape<'_>, x: Var, conv: &ConvParams) -> Result<Var> {
    let avg = t.spatial_pool(x, PoolMode::Avg)?;
    let max = t.spatial_pool(x, PoolMode::Max)?;
    let stacked = t.concat_channels(&[avg, max])?;
    let logits = conv.apply(t, stacked)?;
    Ok(t.sigmoid(logits))
}

/// `X' = X · M_c · M_s` with `M_c = σ(W₀(δ(W₁ GAP(X)) + δ(W₁ GMP(X))))` and
/// `M_s` from a dilated convolution over the pooled channel maps.
pub fn d_cbam(t: &mut Tape<'_>, x: Var, p: &CbamParams) -> Result<Var> {
    let c = channels(t, x)?;
    if p.w1.input_width(t) != c {
        return Err(Error::shape("d_cbam channels", t.shape(x), t.shape(t.param(p.w1.weight))));
    }
    let gap = t.global_pool(x, PoolMode::Avg)?;
    let gmp = t.global_pool(x, PoolMode::Max)?;
    let ha = p.w1.apply(t, gap)?;
    let ha = t.relu(ha);
    let hm = p.w1.apply(t, gmp)?;
    let hm = t.relu(hm);
    let h = t.add(ha, hm)?;
    let mc = p.w0.apply(t, h)?;
    let mc = t.sigmoid(mc);

    let ms = spatial_map(t, x, &p.spatial)?;
    let y = t.scale_channels(x, mc)?;
    t.scale_spatial(y, ms)
}

/// `ReLU(P_l φ_l + P_m φ_m + P_h φ_h)` on the grid of `φ_h`; finer levels are
/// average-pooled down to it.
pub fn mlff(t: &mut Tape<'_>, pyr: PyramidVars, p: &MlffParams) -> Result<Var> {
    let (hh, hw, _) = t.value(pyr.high).hwc()?;
    let mut acc = p.proj_h.apply(t, pyr.high)?;
    for (level, proj) in [(pyr.low, &p.proj_l), (pyr.mid, &p.proj_m)] {
        let (lh, lw, _) = t.value(level).hwc()?;
        if lh % hh != 0 || lw % hw != 0 || lh / hh != lw / hw {
            return Err(Error::shape("mlff grid", t.shape(level), t.shape(pyr.high)));
        }
        let mut y = proj.apply(t, level)?;
        if lh != hh {
            y = t.avg_pool_down(y, lh / hh)?;
        }
        acc = t.add(acc, y)?;
    }
    Ok(t.relu(acc))
}

struct Qkv {
    q: Var,
    k: Var,
    v: Var,
}

fn project_qkv(t: &mut Tape<'_>, tokens: Var, p: &AttentionParams) -> Result<Qkv> {
    let (_, d) = t.value(tokens).rows_cols()?;
    if t.shape(t.param(p.wq))[0] != d {
        return Err(Error::shape("attention tokens", t.shape(tokens), t.shape(t.param(p.wq))));
    }
    let (wq, wk, wv) = (t.param(p.wq), t.param(p.wk), t.param(p.wv));
    Ok(Qkv {
        q: t.matmul(tokens, wq)?,
        k: t.matmul(tokens, wk)?,
        v: t.matmul(tokens, wv)?,
    })
}

/// `concat_i(softmax(Q_i K_iᵀ / √d_k) V_i) · W_O`; keys/values may have a
/// different row count than queries.
fn attend(t: &mut Tape<'_>, qkv: Qkv, p: &AttentionParams) -> Result<Var> {
    let d = t.shape(qkv.q)[1];
    let dk = d / p.heads;
    let scale = 1.0 / sqrt(dk as f64);
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q = t.slice_cols(qkv.q, h * dk, dk)?;
        let k = t.slice_cols(qkv.k, h * dk, dk)?;
        let v = t.slice_cols(qkv.v, h * dk, dk)?;
        let kt = t.transpose(k)?;
        let scores = t.matmul(q, kt)?;
        let scores = t.scale(scores, scale);
        let weights = t.softmax(scores)?;
        heads.push(t.matmul(weights, v)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads)? };
    let wo = t.param(p.wo);
    t.matmul(cat, wo)
}

/// Multi-head scaled dot-product self-attention over `n×D` tokens.
pub fn mhsa(t: &mut Tape<'_>, tokens: Var, p: &AttentionParams) -> Result<Var> {
    let qkv = project_qkv(t, tokens, p)?;
    attend(t, qkv, p)
}

/// Attention against `r` keys/values compressed along the token axis
/// (`K' = Eᵀ K`, `V' = Fᵀ V`), `O(n·r·D)` in the attention step.
pub fn linear_attention(t: &mut Tape<'_>, tokens: Var, p: &AttentionParams) -> Result<Var> {
    let proj = p
        .projection
        .ok_or(Error::MissingBlock("linear attention projection"))?;
    let (n, _) = t.value(tokens).rows_cols()?;
    let e = t.param(proj.e);
    let f = t.param(proj.f);
    if t.shape(e)[0] != n {
        return Err(Error::shape("linear attention projection", t.shape(tokens), t.shape(e)));
    }
    let Qkv { q, k, v } = project_qkv(t, tokens, p)?;
    let et = t.transpose(e)?;
    let ft = t.transpose(f)?;
    let k = t.matmul(et, k)?;
    let v = t.matmul(ft, v)?;
    attend(t, Qkv { q, k, v }, p)
}

/// `LayerNorm(X + Attn(X) + FFN(X))` with `FFN(X) = ReLU(XW₁+b₁)W₂+b₂`.
pub fn transformer_block(
    t: &mut Tape<'_>,
    tokens: Var,
    p: &TransformerBlockParams,
    linear: bool,
    epsilon: f64,
) -> Result<Var> {
    let attn = if linear {
        linear_attention(t, tokens, &p.attention)?
    } else {
        mhsa(t, tokens, &p.attention)?
    };
    let hidden = p.ffn1.apply(t, tokens)?;
    let hidden = t.relu(hidden);
    let ffn = p.ffn2.apply(t, hidden)?;
    let sum = t.add(tokens, attn)?;
    let sum = t.add(sum, ffn)?;
    let (g, b) = (t.param(p.ln_gamma), t.param(p.ln_beta));
    t.layer_norm(sum, g, b, epsilon)
}

fn run_block(
    params: &ParamSet,
    input: &Tensor,
    f: impl FnOnce(&mut Tape<'_>, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut t = Tape::with_params(params);
    let x = t.constant(input.clone());
    let y = f(&mut t, x)?;
    Ok(t.value(y).clone())
}

pub fn dat_se_forward(x: &Tensor, params: &ParamSet, p: &SeBlockParams) -> Result<Tensor> {
    run_block(params, x, |t, x| dat_se(t, x, p))
}

pub fn d_cbam_forward(x: &Tensor, params: &ParamSet, p: &CbamParams) -> Result<Tensor> {
    run_block(params, x, |t, x| d_cbam(t, x, p))
}

pub fn mhsa_forward(tokens: &Tensor, params: &ParamSet, p: &AttentionParams) -> Result<Tensor> {
    run_block(params, tokens, |t, x| mhsa(t, x, p))
}

pub fn linear_attention_forward(tokens: &Tensor, params: &ParamSet, p: &AttentionParams) -> Result<Tensor> {
    run_block(params, tokens, |t, x| linear_attention(t, x, p))
}

pub fn transformer_block_forward(
    tokens: &Tensor,
    params: &ParamSet,
    p: &TransformerBlockParams,
    linear: bool,
) -> Result<Tensor> {
    run_block(params, tokens, |t, x| {
        transformer_block(t, x, p, linear, super::LAYER_NORM_EPS)
    })
}

pub fn mlff_fuse(pyr: &FeaturePyramid, params: &ParamSet, p: &MlffParams) -> Result<Tensor> {
    let mut t = Tape::with_params(params);
    let vars = PyramidVars {
        low: t.constant(pyr.low.clone()),
        mid: t.constant(pyr.mid.clone()),
        high: t.constant(pyr.high.clone()),
    };
    let y = mlff(&mut t, vars, p)?;
    Ok(t.value(y).clone())
}

//! The L-ViT tile classifier.
//!
//! ```text
//! tile 32×32×3
//!   └ backbone: 3 stride-2 stages (16/32/64 ch), taps at 16×16, 8×8, 4×4
//!       └ [DAT-SE] → [D-CBAM] on the 4×4 map
//!           └ [MLFF: fuse all three taps] or the 4×4 map alone
//!               └ 1×1 projection to 16 tokens × 64 + positional table
//!                   └ [VTM: 2 transformer blocks]
//!                       └ mean over tokens → dense → softmax (3 classes)
//! ```
//!
//! Bracketed stages are switched by [`LVitConfig`]; the four ablation
//! variants are available through [`Variant`].

pub mod blocks;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use blocks::{
    d_cbam_forward, dat_se_forward, linear_attention_forward, mhsa_forward, mlff_fuse,
    transformer_block_forward, AttentionParams, CbamParams, ConvParams, DenseParams,
    FeaturePyramid, MlffParams, PyramidVars, SeBlockParams, SequenceProjection,
    TransformerBlockParams,
};

use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;
use crate::{NUM_CLASSES, TILE_SIZE};

pub const BACKBONE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const SE_REDUCTION: usize = 8;
pub const SE_KERNEL: usize = 7;
pub const CBAM_REDUCTION: usize = 8;
pub const CBAM_KERNEL: usize = 7;
pub const CBAM_DILATION: usize = 2;
/// Token embedding width, also the MLFF common width.
pub const EMBED_DIM: usize = 64;
pub const HEADS: usize = 4;
pub const FFN_HIDDEN: usize = 128;
pub const VTM_DEPTH: usize = 2;
/// Sequence rank for linear attention.
pub const LINEAR_RANK: usize = 8;
/// 4×4 grid of the last backbone stage.
pub const TOKENS: usize = 16;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Subtracted from every `[0,1]` input pixel before the first convolution.
pub const INPUT_SHIFT: f64 = 0.5;

/// Which optional blocks take part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LVitConfig {
    pub dat_se: bool,
    pub d_cbam: bool,
    pub mlff: bool,
    pub vtm: bool,
    /// Use sequence-compressed attention inside the transformer blocks.
    pub linear_attention: bool,
}

impl LVitConfig {
    pub const KEYS: [&'static str; 5] = ["dat_se", "d_cbam", "mlff", "vtm", "linear_attention"];

    pub fn full() -> Self {
        Variant::All.config()
    }

    pub fn flags(&self) -> [(&'static str, bool); 5] {
        [
            ("dat_se", self.dat_se),
            ("d_cbam", self.d_cbam),
            ("mlff", self.mlff),
            ("vtm", self.vtm),
            ("linear_attention", self.linear_attention),
        ]
    }

    pub fn set_flag(&mut self, key: &str, value: bool) -> Result<()> {
        let slot = match key {
            "dat_se" => &mut self.dat_se,
            "d_cbam" => &mut self.d_cbam,
            "mlff" => &mut self.mlff,
            "vtm" => &mut self.vtm,
            "linear_attention" => &mut self.linear_attention,
            other => return Err(Error::invalid(format!("unknown model flag `{other}`"))),
        };
        *slot = value;
        Ok(())
    }
}

/// The four ablation configurations, from the bare backbone to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Backbone,
    Vtm,
    VtmDatSe,
    All,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Backbone, Variant::Vtm, Variant::VtmDatSe, Variant::All];

    pub fn config(self) -> LVitConfig {
        let (vtm, dat_se, rest) = match self {
            Variant::Backbone => (false, false, false),
            Variant::Vtm => (true, false, false),
            Variant::VtmDatSe => (true, true, false),
            Variant::All => (true, true, true),
        };
        LVitConfig {
            dat_se,
            d_cbam: rest,
            mlff: rest,
            vtm,
            linear_attention: false,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Backbone => "Backbone",
            Variant::Vtm => "+ VTM",
            Variant::VtmDatSe => "+ VTM & DAT-SE",
            Variant::All => "All (L-ViT)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Backbone => "backbone",
            Variant::Vtm => "vtm",
            Variant::VtmDatSe => "vtm-datse",
            Variant::All => "all",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// All trainable tensors plus the layout that names their roles.
#[derive(Debug, Clone, PartialEq)]
pub struct LVitParams {
    pub params: ParamSet,
    /// Two convolutions per stage, stride 2 then stride 1.
    pub backbone: [ConvParams; 6],
    pub se: Option<SeBlockParams>,
    pub cbam: Option<CbamParams>,
    pub mlff: Option<MlffParams>,
    pub token_proj: ConvParams,
    pub pos_embed: ParamId,
    pub vtm: Vec<TransformerBlockParams>,
    pub head: DenseParams,
}

struct Builder {
    params: ParamSet,
    rng: ChaCha8Rng,
}

impl Builder {
    fn glorot(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-a..=a));
        self.params.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.params.add(name, Tensor::full(shape, value))
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, spec: ConvSpec) -> ConvParams {
        let kernel = self.glorot(format!("{name}.kernel"), &[k, k, cin, cout], k * k * cin, k * k * cout);
        let bias = self.constant(format!("{name}.bias"), &[cout], 0.0);
        ConvParams { kernel, bias, spec }
    }

    /// Convolution followed by ReLU: uniform with `a = sqrt(6/fan_in)` so the
    /// activation scale survives the stack.
    fn relu_conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, spec: ConvSpec) -> ConvParams {
        let fan_in = k * k * cin;
        let a = libm::sqrt(6.0 / fan_in as f64);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&[k, k, cin, cout], |_| rng.gen_range(-a..=a));
        let kernel = self.params.add(format!("{name}.kernel"), t);
        let bias = self.constant(format!("{name}.bias"), &[cout], 0.0);
        ConvParams { kernel, bias, spec }
    }

    fn dense(&mut self, name: &str, n: usize, m: usize) -> DenseParams {
        let weight = self.glorot(format!("{name}.weight"), &[n, m], n, m);
        let bias = self.constant(format!("{name}.bias"), &[m], 0.0);
        DenseParams { weight, bias }
    }

    fn square(&mut self, name: String, d: usize) -> ParamId {
        self.glorot(name, &[d, d], d, d)
    }
}

impl LVitParams {
    /// Fresh Glorot-uniform weights (zero biases, unit norm gains) for every
    /// block `config` enables. Deterministic in `seed`.
    pub fn init(config: &LVitConfig, seed: u64) -> Self {
        let mut b = Builder {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let [c1, c2, c3] = BACKBONE_CHANNELS;
        let plan = [(3, c1), (c1, c1), (c1, c2), (c2, c2), (c2, c3), (c3, c3)];
        let backbone = core::array::from_fn(|i| {
            let (cin, cout) = plan[i];
            let spec = if i % 2 == 0 { ConvSpec::strided(2) } else { ConvSpec::same() };
            b.relu_conv(&format!("backbone.{i}"), 3, cin, cout, spec)
        });

        let se = config.dat_se.then(|| SeBlockParams {
            fc1: b.dense("dat_se.fc1", c3, c3 / SE_REDUCTION),
            fc2: b.dense("dat_se.fc2", c3 / SE_REDUCTION, c3),
            spatial: b.conv("dat_se.spatial", SE_KERNEL, 2, 1, ConvSpec::same()),
            reduction: SE_REDUCTION,
        });
        let cbam = config.d_cbam.then(|| CbamParams {
            w1: b.dense("d_cbam.w1", c3, c3 / CBAM_REDUCTION),
            w0: b.dense("d_cbam.w0", c3 / CBAM_REDUCTION, c3),
            spatial: b.conv("d_cbam.spatial", CBAM_KERNEL, 2, 1, ConvSpec::dilated(CBAM_DILATION)),
            dilation: CBAM_DILATION,
        });
        let mlff = config.mlff.then(|| MlffParams {
            proj_l: b.conv("mlff.proj_l", 1, c1, EMBED_DIM, ConvSpec::same()),
            proj_m: b.conv("mlff.proj_m", 1, c2, EMBED_DIM, ConvSpec::same()),
            proj_h: b.conv("mlff.proj_h", 1, c3, EMBED_DIM, ConvSpec::same()),
        });
        let fused = if config.mlff { EMBED_DIM } else { c3 };
        let token_proj = b.conv("tokens.proj", 1, fused, EMBED_DIM, ConvSpec::same());
        // Additive per-token offsets start at zero like every other bias.
        let pos_embed = b.constant("tokens.pos".into(), &[TOKENS, EMBED_DIM], 0.0);

        let depth = if config.vtm { VTM_DEPTH } else { 0 };
        let vtm = (0..depth)
            .map(|i| {
                let n = format!("vtm.{i}");
                let ids = [
                    b.square(format!("{n}.attn.wq"), EMBED_DIM),
                    b.square(format!("{n}.attn.wk"), EMBED_DIM),
                    b.square(format!("{n}.attn.wv"), EMBED_DIM),
                    b.square(format!("{n}.attn.wo"), EMBED_DIM),
                ];
                let projection = config.linear_attention.then(|| SequenceProjection {
                    e: b.glorot(format!("{n}.attn.proj_e"), &[TOKENS, LINEAR_RANK], TOKENS, LINEAR_RANK),
                    f: b.glorot(format!("{n}.attn.proj_f"), &[TOKENS, LINEAR_RANK], TOKENS, LINEAR_RANK),
                });
                let attention = AttentionParams::new(&b.params, ids, HEADS, projection)
                    .expect("fixed attention geometry is valid");
                TransformerBlockParams {
                    attention,
                    ffn1: b.dense(&format!("{n}.ffn1"), EMBED_DIM, FFN_HIDDEN),
                    ffn2: b.dense(&format!("{n}.ffn2"), FFN_HIDDEN, EMBED_DIM),
                    ln_gamma: b.constant(format!("{n}.ln.gamma"), &[EMBED_DIM], 1.0),
                    ln_beta: b.constant(format!("{n}.ln.beta"), &[EMBED_DIM], 0.0),
                }
            })
            .collect();
        let head = b.dense("head", EMBED_DIM, NUM_CLASSES);

        LVitParams {
            params: b.params,
            backbone,
            se,
            cbam,
            mlff,
            token_proj,
            pos_embed,
            vtm,
            head,
        }
    }

    /// Rebuilds the layout for `config` around externally loaded tensors.
    /// Names and shapes must match exactly.
    pub fn from_param_set(config: &LVitConfig, loaded: ParamSet) -> Result<Self> {
        let mut model = Self::init(config, 0);
        if loaded.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors for this configuration, found {}",
                model.params.len(),
                loaded.len()
            )));
        }
        for (name, tensor) in loaded.iter() {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::invalid(format!("unexpected parameter `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(Error::shape("parameter", slot.shape(), tensor.shape()));
            }
            *slot = tensor.clone();
        }
        Ok(model)
    }

    fn check(&self, config: &LVitConfig) -> Result<()> {
        if config.dat_se && self.se.is_none() {
            return Err(Error::MissingBlock("dat_se"));
        }
        if config.d_cbam && self.cbam.is_none() {
            return Err(Error::MissingBlock("d_cbam"));
        }
        if config.mlff && self.mlff.is_none() {
            return Err(Error::MissingBlock("mlff"));
        }
        if config.vtm && self.vtm.is_empty() {
            return Err(Error::MissingBlock("vtm"));
        }
        if config.vtm
            && config.linear_attention
            && self.vtm.iter().any(|b| b.attention.projection.is_none())
        {
            return Err(Error::MissingBlock("linear_attention"));
        }
        let fused = if config.mlff { EMBED_DIM } else { BACKBONE_CHANNELS[2] };
        let proj_in = self.params.get(self.token_proj.kernel).shape()[2];
        if proj_in != fused {
            return Err(Error::invalid(format!(
                "token projection expects {proj_in} channels but this configuration produces {fused}"
            )));
        }
        Ok(())
    }
}

fn check_tile(shape: &[usize]) -> Result<()> {
    if shape != [TILE_SIZE, TILE_SIZE, 3] {
        return Err(Error::shape("tile", shape, &[TILE_SIZE, TILE_SIZE, 3]));
    }
    Ok(())
}

/// Backbone taps at 16×16, 8×8 and 4×4.
pub fn backbone(t: &mut Tape<'_>, tile: Var, p: &LVitParams) -> Result<PyramidVars> {
    check_tile(t.shape(tile))?;
    let shift = t.constant(Tensor::full(&[TILE_SIZE, TILE_SIZE, 3], -INPUT_SHIFT));
    let mut x = t.add(tile, shift)?;
    let mut taps = [tile; 3];
    for (i, conv) in p.backbone.iter().enumerate() {
        x = conv.apply(t, x)?;
        x = t.relu(x);
        if i % 2 == 1 {
            taps[i / 2] = x;
        }
    }
    Ok(PyramidVars {
        low: taps[0],
        mid: taps[1],
        high: taps[2],
    })
}

pub fn backbone_forward(tile: &Tensor, p: &LVitParams) -> Result<FeaturePyramid> {
    let mut t = Tape::with_params(&p.params);
    let x = t.constant(tile.clone());
    let pyr = backbone(&mut t, x, p)?;
    Ok(FeaturePyramid {
        low: t.value(pyr.low).clone(),
        mid: t.value(pyr.mid).clone(),
        high: t.value(pyr.high).clone(),
    })
}

/// Records the full classifier; returns the class-probability vector.
pub fn lvit(t: &mut Tape<'_>, tile: Var, p: &LVitParams, config: &LVitConfig) -> Result<Var> {
    p.check(config)?;
    let pyr = backbone(t, tile, p)?;
    let mut high = pyr.high;
    if config.dat_se {
        high = blocks::dat_se(t, high, p.se.as_ref().unwrap())?;
    }
    if config.d_cbam {
        high = blocks::d_cbam(t, high, p.cbam.as_ref().unwrap())?;
    }
    let fused = if config.mlff {
        let pyr = PyramidVars { high, ..pyr };
        blocks::mlff(t, pyr, p.mlff.as_ref().unwrap())?
    } else {
        high
    };
    let grid = p.token_proj.apply(t, fused)?;
    let (gh, gw, d) = t.value(grid).hwc()?;
    let tokens = t.reshape(grid, &[gh * gw, d])?;
    let pos = t.param(p.pos_embed);
    let mut tokens = t.add(tokens, pos)?;
    if config.vtm {
        for block in &p.vtm {
            tokens = blocks::transformer_block(t, tokens, block, config.linear_attention, LAYER_NORM_EPS)?;
        }
    }
    let pooled = t.mean_rows(tokens)?;
    let logits = p.head.apply(t, pooled)?;
    t.softmax(logits)
}

/// Class probabilities for one tile.
pub fn lvit_forward(tile: &Tensor, p: &LVitParams, config: &LVitConfig) -> Result<[f64; NUM_CLASSES]> {
    let mut t = Tape::with_params(&p.params);
    let x = t.constant(tile.clone());
    let probs = lvit(&mut t, x, p, config)?;
    let d = t.value(probs).data();
    Ok([d[0], d[1], d[2]])
}

/// Cross-entropy loss for one labeled tile and its gradient for every
/// parameter, in [`ParamSet`] order.
pub fn loss_and_grads(
    tile: &Tensor,
    label: usize,
    p: &LVitParams,
    config: &LVitConfig,
) -> Result<(f64, Vec<Tensor>)> {
    if label >= NUM_CLASSES {
        return Err(Error::LabelOutOfRange(label));
    }
    let mut t = Tape::with_params(&p.params);
    let x = t.constant(tile.clone());
    let probs = lvit(&mut t, x, p, config)?;
    let loss = t.nll(probs, label, crate::train::PROB_FLOOR)?;
    let value = t.value(loss).data()[0];
    let grads = t.backward(loss)?.into_param_grads();
    Ok((value, grads))
}

#[cfg(test)]
mod tests;

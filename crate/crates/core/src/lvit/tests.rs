use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::ops::{self, PoolMode};
use crate::tape::relative_error;
use crate::tape::test_util::rand_tensor;

fn dense_p(ps: &mut ParamSet, name: &str, n: usize, m: usize, seed: u64) -> DenseParams {
    DenseParams {
        weight: ps.add(format!("{name}.w"), rand_tensor(&[n, m], seed)),
        bias: ps.add(format!("{name}.b"), rand_tensor(&[m], seed + 1)),
    }
}

fn conv_p(ps: &mut ParamSet, name: &str, k: usize, cin: usize, cout: usize, spec: ConvSpec, seed: u64) -> ConvParams {
    ConvParams {
        kernel: ps.add(format!("{name}.k"), rand_tensor(&[k, k, cin, cout], seed)),
        bias: ps.add(format!("{name}.b"), rand_tensor(&[cout], seed + 1)),
        spec,
    }
}

fn zero_all(ps: &mut ParamSet) {
    for t in ps.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn se_params(c: usize, seed: u64) -> (ParamSet, SeBlockParams) {
    let mut ps = ParamSet::new();
    let p = SeBlockParams {
        fc1: dense_p(&mut ps, "fc1", c, c / 2, seed),
        fc2: dense_p(&mut ps, "fc2", c / 2, c, seed + 10),
        spatial: conv_p(&mut ps, "sp", 7, 2, 1, ConvSpec::same(), seed + 20),
        reduction: 2,
    };
    (ps, p)
}

fn cbam_params(c: usize, seed: u64) -> (ParamSet, CbamParams) {
    let mut ps = ParamSet::new();
    let p = CbamParams {
        w1: dense_p(&mut ps, "w1", c, c / 2, seed),
        w0: dense_p(&mut ps, "w0", c / 2, c, seed + 10),
        spatial: conv_p(&mut ps, "sp", 7, 2, 1, ConvSpec::dilated(2), seed + 20),
        dilation: 2,
    };
    (ps, p)
}

fn attention_params(d: usize, heads: usize, n: usize, r: usize, seed: u64) -> (ParamSet, AttentionParams) {
    let mut ps = ParamSet::new();
    let ids = [
        ps.add("wq", rand_tensor(&[d, d], seed)),
        ps.add("wk", rand_tensor(&[d, d], seed + 1)),
        ps.add("wv", rand_tensor(&[d, d], seed + 2)),
        ps.add("wo", rand_tensor(&[d, d], seed + 3)),
    ];
    let proj = SequenceProjection {
        e: ps.add("e", rand_tensor(&[n, r], seed + 4)),
        f: ps.add("f", rand_tensor(&[n, r], seed + 5)),
    };
    let p = AttentionParams::new(&ps, ids, heads, Some(proj)).unwrap();
    (ps, p)
}

/// Pooled `[avg ‖ max]` channel maps built without the tape.
fn pooled_pair(x: &Tensor) -> Tensor {
    let a = ops::spatial_pool_over_channels(x, PoolMode::Avg).unwrap();
    let m = ops::spatial_pool_over_channels(x, PoolMode::Max).unwrap();
    let (h, w, _) = x.hwc().unwrap();
    let data = a.data().iter().zip(m.data()).flat_map(|(&a, &m)| [a, m]).collect();
    Tensor::new(vec![h, w, 2], data).unwrap()
}

fn recalibrate(x: &Tensor, s: &Tensor, m: &Tensor) -> Tensor {
    let c = s.len();
    Tensor::from_fn(x.shape(), |i| x.data()[i] * s.data()[i % c] * m.data()[i / c])
}

fn dense_of(ps: &ParamSet, x: &Tensor, d: &DenseParams) -> Tensor {
    ops::dense(x, ps.get(d.weight), ps.get(d.bias)).unwrap()
}

fn conv_of(ps: &ParamSet, x: &Tensor, c: &ConvParams) -> Tensor {
    ops::conv2d(x, ps.get(c.kernel), Some(ps.get(c.bias)), c.spec).unwrap()
}

#[test]
fn dat_se_zero_weights_quarter_input() {
    let (mut ps, p) = se_params(8, 1);
    zero_all(&mut ps);
    let x = rand_tensor(&[4, 4, 8], 2);
    let y = dat_se_forward(&x, &ps, &p).unwrap();
    let expected = x.map(|v| 0.25 * v);
    assert!(y.max_abs_diff(&expected) <= 1e-15);
    let zero = dat_se_forward(&Tensor::zeros(&[4, 4, 8]), &ps, &p).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dat_se_matches_composition_oracle() {
    for seed in 0..10 {
        let (ps, p) = se_params(8, seed * 31);
        let x = rand_tensor(&[4, 4, 8], seed);
        let z = ops::global_pool(&x, PoolMode::Avg).unwrap();
        let h = ops::activation(&dense_of(&ps, &z, &p.fc1), ops::Activation::Relu);
        let s = ops::activation(&dense_of(&ps, &h, &p.fc2), ops::Activation::Sigmoid);
        let m = ops::activation(&conv_of(&ps, &pooled_pair(&x), &p.spatial), ops::Activation::Sigmoid);
        let oracle = recalibrate(&x, &s, &m);
        let y = dat_se_forward(&x, &ps, &p).unwrap();
        assert!(y.max_abs_diff(&oracle) <= 1e-10);
    }
}

#[test]
fn dat_se_rejects_channel_mismatch() {
    let (ps, p) = se_params(8, 1);
    assert!(dat_se_forward(&Tensor::zeros(&[4, 4, 6]), &ps, &p).is_err());
}

#[test]
fn d_cbam_zero_weights_and_zero_input() {
    let (mut ps, p) = cbam_params(4, 3);
    let zero = d_cbam_forward(&Tensor::zeros(&[6, 6, 4]), &ps, &p).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    zero_all(&mut ps);
    let x = rand_tensor(&[6, 6, 4], 4);
    let y = d_cbam_forward(&x, &ps, &p).unwrap();
    assert!(y.max_abs_diff(&x.map(|v| 0.25 * v)) <= 1e-15);
}

#[test]
fn d_cbam_matches_composition_oracle() {
    for seed in 0..10 {
        let (ps, p) = cbam_params(4, seed * 17);
        let x = rand_tensor(&[6, 6, 4], seed + 50);
        let relu = |t: Tensor| ops::activation(&t, ops::Activation::Relu);
        let ha = relu(dense_of(&ps, &ops::global_pool(&x, PoolMode::Avg).unwrap(), &p.w1));
        let hm = relu(dense_of(&ps, &ops::global_pool(&x, PoolMode::Max).unwrap(), &p.w1));
        let sum = Tensor::from_fn(ha.shape(), |i| ha.data()[i] + hm.data()[i]);
        let mc = ops::activation(&dense_of(&ps, &sum, &p.w0), ops::Activation::Sigmoid);
        let ms = ops::activation(&conv_of(&ps, &pooled_pair(&x), &p.spatial), ops::Activation::Sigmoid);
        let oracle = recalibrate(&x, &mc, &ms);
        let y = d_cbam_forward(&x, &ps, &p).unwrap();
        assert!(y.max_abs_diff(&oracle) <= 1e-10);
    }
}

fn identity_conv(ps: &mut ParamSet, name: &str, cin: usize, cout: usize) -> ConvParams {
    ConvParams {
        kernel: ps.add(
            format!("{name}.k"),
            Tensor::from_fn(&[1, 1, cin, cout], |i| if i / cout == i % cout { 1.0 } else { 0.0 }),
        ),
        bias: ps.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        spec: ConvSpec::same(),
    }
}

#[test]
fn mlff_examples() {
    let mut ps = ParamSet::new();
    let p = MlffParams {
        proj_l: identity_conv(&mut ps, "l", 3, 3),
        proj_m: identity_conv(&mut ps, "m", 3, 3),
        proj_h: identity_conv(&mut ps, "h", 3, 3),
    };
    let low = rand_tensor(&[4, 4, 3], 1).map(f64::abs);
    let pyr = FeaturePyramid {
        low: low.clone(),
        mid: Tensor::zeros(&[4, 4, 3]),
        high: Tensor::zeros(&[4, 4, 3]),
    };
    assert_eq!(mlff_fuse(&pyr, &ps, &p).unwrap(), low);
    let zeros = FeaturePyramid {
        low: Tensor::zeros(&[16, 16, 3]),
        mid: Tensor::zeros(&[8, 8, 3]),
        high: Tensor::zeros(&[4, 4, 3]),
    };
    assert!(mlff_fuse(&zeros, &ps, &p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn mlff_matches_composition_oracle() {
    for seed in 0..10 {
        let mut ps = ParamSet::new();
        let p = MlffParams {
            proj_l: conv_p(&mut ps, "l", 1, 2, 5, ConvSpec::same(), seed),
            proj_m: conv_p(&mut ps, "m", 1, 3, 5, ConvSpec::same(), seed + 3),
            proj_h: conv_p(&mut ps, "h", 1, 4, 5, ConvSpec::same(), seed + 6),
        };
        let pyr = FeaturePyramid {
            low: rand_tensor(&[16, 16, 2], seed + 10),
            mid: rand_tensor(&[8, 8, 3], seed + 11),
            high: rand_tensor(&[4, 4, 4], seed + 12),
        };
        let l = ops::avg_pool_down(&conv_of(&ps, &pyr.low, &p.proj_l), 4).unwrap();
        let m = ops::avg_pool_down(&conv_of(&ps, &pyr.mid, &p.proj_m), 2).unwrap();
        let h = conv_of(&ps, &pyr.high, &p.proj_h);
        let oracle = Tensor::from_fn(h.shape(), |i| (l.data()[i] + m.data()[i] + h.data()[i]).max(0.0));
        let y = mlff_fuse(&pyr, &ps, &p).unwrap();
        assert_eq!(y.shape(), &[4, 4, 5]);
        assert!(y.max_abs_diff(&oracle) <= 1e-10);
    }
}

/// Per-head attention written with explicit loops.
fn naive_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Tensor {
    let (n, d) = q.rows_cols().unwrap();
    let (nk, _) = k.rows_cols().unwrap();
    let dk = d / heads;
    let mut cat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = Vec::new();
            for j in 0..nk {
                let mut s = 0.0;
                for c in 0..dk {
                    s += q.data()[i * d + h * dk + c] * k.data()[j * d + h * dk + c];
                }
                scores.push(s / libm::sqrt(dk as f64));
            }
            let max = scores.iter().copied().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| libm::exp(s - max)).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..dk {
                let mut acc = 0.0;
                for j in 0..nk {
                    acc += exps[j] / total * v.data()[j * d + h * dk + c];
                }
                cat[i * d + h * dk + c] = acc;
            }
        }
    }
    ops::matmul(&Tensor::new(vec![n, d], cat).unwrap(), wo).unwrap()
}

#[test]
fn mhsa_matches_loop_oracle() {
    for seed in 0..10 {
        let (ps, p) = attention_params(8, 2, 5, 3, seed * 7);
        let x = rand_tensor(&[5, 8], seed + 99);
        let q = ops::matmul(&x, ps.get(p.wq)).unwrap();
        let k = ops::matmul(&x, ps.get(p.wk)).unwrap();
        let v = ops::matmul(&x, ps.get(p.wv)).unwrap();
        let oracle = naive_attention(&q, &k, &v, ps.get(p.wo), 2);
        let y = mhsa_forward(&x, &ps, &p).unwrap();
        assert!(y.max_abs_diff(&oracle) <= 1e-10);
    }
}

#[test]
fn mhsa_single_token_is_value_projection() {
    let (ps, p) = attention_params(8, 4, 1, 1, 3);
    let x = rand_tensor(&[1, 8], 4);
    let v = ops::matmul(&x, ps.get(p.wv)).unwrap();
    let expected = ops::matmul(&v, ps.get(p.wo)).unwrap();
    let y = mhsa_forward(&x, &ps, &p).unwrap();
    assert!(y.max_abs_diff(&expected) <= 1e-12);
}

#[test]
fn mhsa_identical_keys_average_values() {
    let (mut ps, p) = attention_params(8, 2, 5, 5, 3);
    *ps.get_mut(p.wk) = Tensor::zeros(&[8, 8]);
    let x = rand_tensor(&[5, 8], 8);
    let v = ops::matmul(&x, ps.get(p.wv)).unwrap();
    let mean = Tensor::from_fn(&[1, 8], |c| (0..5).map(|r| v.data()[r * 8 + c]).sum::<f64>() / 5.0);
    let row = ops::matmul(&mean, ps.get(p.wo)).unwrap();
    let y = mhsa_forward(&x, &ps, &p).unwrap();
    for r in 0..5 {
        for c in 0..8 {
            assert!((y.data()[r * 8 + c] - row.data()[c]).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let (ps, p) = attention_params(8, 2, 4, 2, 1);
    assert!(AttentionParams::new(&ps, [p.wq, p.wk, p.wv, p.wo], 3, None).is_err());
}

#[test]
fn mhsa_head_permutation_with_consistent_output_rows() {
    let (ps, p) = attention_params(8, 4, 6, 3, 11);
    let x = rand_tensor(&[6, 8], 12);
    let y = mhsa_forward(&x, &ps, &p).unwrap();
    let perm = [2usize, 0, 3, 1];
    let dk = 2;
    let permute_cols = |w: &Tensor| {
        Tensor::from_fn(&[8, 8], |i| {
            let (r, c) = (i / 8, i % 8);
            let (h, o) = (c / dk, c % dk);
            w.data()[r * 8 + perm[h] * dk + o]
        })
    };
    let permute_rows = |w: &Tensor| {
        Tensor::from_fn(&[8, 8], |i| {
            let (r, c) = (i / 8, i % 8);
            let (h, o) = (r / dk, r % dk);
            w.data()[(perm[h] * dk + o) * 8 + c]
        })
    };
    let mut ps2 = ps.clone();
    for id in [p.wq, p.wk, p.wv] {
        *ps2.get_mut(id) = permute_cols(ps.get(id));
    }
    *ps2.get_mut(p.wo) = permute_rows(ps.get(p.wo));
    let y2 = mhsa_forward(&x, &ps2, &p).unwrap();
    assert!(y.max_abs_diff(&y2) <= 1e-12);
}

#[test]
fn linear_attention_with_identity_projection_is_mhsa() {
    for seed in 0..5 {
        let (mut ps, p) = attention_params(8, 2, 6, 6, seed);
        let proj = p.projection.unwrap();
        *ps.get_mut(proj.e) = Tensor::identity(6);
        *ps.get_mut(proj.f) = Tensor::identity(6);
        let x = rand_tensor(&[6, 8], seed + 40);
        let full = mhsa_forward(&x, &ps, &p).unwrap();
        let lin = linear_attention_forward(&x, &ps, &p).unwrap();
        assert!(full.max_abs_diff(&lin) <= 1e-10);
    }
    let (mut ps, p) = attention_params(8, 2, 1, 1, 9);
    let proj = p.projection.unwrap();
    *ps.get_mut(proj.e) = Tensor::full(&[1, 1], 1.0);
    *ps.get_mut(proj.f) = Tensor::full(&[1, 1], 1.0);
    let x = rand_tensor(&[1, 8], 10);
    let lin = linear_attention_forward(&x, &ps, &p).unwrap();
    assert!(lin.max_abs_diff(&mhsa_forward(&x, &ps, &p).unwrap()) <= 1e-12);
}

#[test]
fn linear_attention_matches_compressed_oracle_and_rejects_bad_projection() {
    let (ps, p) = attention_params(8, 2, 6, 3, 21);
    let x = rand_tensor(&[6, 8], 22);
    let proj = p.projection.unwrap();
    let q = ops::matmul(&x, ps.get(p.wq)).unwrap();
    let k = ops::matmul_tn(ps.get(proj.e), &ops::matmul(&x, ps.get(p.wk)).unwrap()).unwrap();
    let v = ops::matmul_tn(ps.get(proj.f), &ops::matmul(&x, ps.get(p.wv)).unwrap()).unwrap();
    let oracle = naive_attention(&q, &k, &v, ps.get(p.wo), 2);
    let y = linear_attention_forward(&x, &ps, &p).unwrap();
    assert!(y.max_abs_diff(&oracle) <= 1e-10);
    assert!(linear_attention_forward(&rand_tensor(&[5, 8], 1), &ps, &p).is_err());
}

fn block_params(d: usize, hidden: usize, n: usize, seed: u64) -> (ParamSet, TransformerBlockParams) {
    let (mut ps, attention) = attention_params(d, 2, n, n.min(3), seed);
    let ffn1 = dense_p(&mut ps, "ffn1", d, hidden, seed + 50);
    let ffn2 = dense_p(&mut ps, "ffn2", hidden, d, seed + 60);
    let ln_gamma = ps.add("g", Tensor::full(&[d], 1.0));
    let ln_beta = ps.add("b", Tensor::zeros(&[d]));
    (ps, TransformerBlockParams { attention, ffn1, ffn2, ln_gamma, ln_beta })
}

#[test]
fn transformer_block_zero_branches_is_layer_norm() {
    let (mut ps, p) = block_params(8, 16, 5, 1);
    for id in ps.ids().collect::<Vec<_>>() {
        if id != p.ln_gamma {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = rand_tensor(&[5, 8], 2);
    let y = transformer_block_forward(&x, &ps, &p, false).unwrap();
    let ln = ops::layer_norm(&x, ps.get(p.ln_gamma), ps.get(p.ln_beta), LAYER_NORM_EPS).unwrap();
    assert!(y.max_abs_diff(&ln) <= 1e-15);
    let constant = Tensor::full(&[5, 8], 0.7);
    let y = transformer_block_forward(&constant, &ps, &p, false).unwrap();
    assert!(y.data().iter().all(|&v| v.abs() <= 1e-12));
}

#[test]
fn transformer_block_matches_composition_oracle() {
    for seed in 0..5 {
        let (ps, p) = block_params(8, 16, 5, seed * 13);
        let x = rand_tensor(&[5, 8], seed + 77);
        let a = &p.attention;
        let q = ops::matmul(&x, ps.get(a.wq)).unwrap();
        let k = ops::matmul(&x, ps.get(a.wk)).unwrap();
        let v = ops::matmul(&x, ps.get(a.wv)).unwrap();
        let attn = naive_attention(&q, &k, &v, ps.get(a.wo), 2);
        let hidden = ops::activation(&dense_of(&ps, &x, &p.ffn1), ops::Activation::Relu);
        let ffn = dense_of(&ps, &hidden, &p.ffn2);
        let sum = Tensor::from_fn(x.shape(), |i| x.data()[i] + attn.data()[i] + ffn.data()[i]);
        let oracle = ops::layer_norm(&sum, ps.get(p.ln_gamma), ps.get(p.ln_beta), LAYER_NORM_EPS).unwrap();
        let y = transformer_block_forward(&x, &ps, &p, false).unwrap();
        assert!(y.max_abs_diff(&oracle) <= 1e-9);
    }
}

fn rand_tile(seed: u64) -> Tensor {
    rand_tensor(&[32, 32, 3], seed).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn backbone_taps_and_determinism() {
    let p = LVitParams::init(&LVitConfig::full(), 5);
    let pyr = backbone_forward(&rand_tile(1), &p).unwrap();
    assert_eq!(pyr.low.shape(), &[16, 16, 16]);
    assert_eq!(pyr.mid.shape(), &[8, 8, 32]);
    assert_eq!(pyr.high.shape(), &[4, 4, 64]);
    let again = backbone_forward(&rand_tile(1), &LVitParams::init(&LVitConfig::full(), 5)).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&pyr.high), bits(&again.high));
    assert_eq!(bits(&pyr.low), bits(&again.low));
    let zero = backbone_forward(&Tensor::zeros(&[32, 32, 3]), &p).unwrap();
    assert!(zero.low.is_finite() && zero.high.is_finite());
    assert!(backbone_forward(&Tensor::zeros(&[16, 16, 3]), &p).is_err());
}

#[test]
fn lvit_outputs_distribution_for_every_variant() {
    for variant in Variant::ALL {
        for linear in [false, true] {
            let mut cfg = variant.config();
            cfg.linear_attention = linear;
            let p = LVitParams::init(&cfg, 3);
            for seed in 0..3 {
                let probs = lvit_forward(&rand_tile(seed), &p, &cfg).unwrap();
                assert!(probs.iter().all(|&v| v >= 0.0));
                assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn lvit_rejects_missing_blocks() {
    let p = LVitParams::init(&Variant::Backbone.config(), 1);
    let tile = rand_tile(0);
    assert_eq!(
        lvit_forward(&tile, &p, &Variant::All.config()),
        Err(Error::MissingBlock("dat_se"))
    );
    let mut cfg = Variant::Vtm.config();
    let p = LVitParams::init(&cfg, 1);
    cfg.linear_attention = true;
    assert!(lvit_forward(&tile, &p, &cfg).is_err());
}

#[test]
fn backbone_variant_equals_hand_assembled_composition() {
    let cfg = Variant::Backbone.config();
    let p = LVitParams::init(&cfg, 9);
    let ps = &p.params;
    let tile = rand_tile(4);
    let mut x = tile.map(|v| v - INPUT_SHIFT);
    for conv in &p.backbone {
        x = ops::activation(&conv_of(ps, &x, conv), ops::Activation::Relu);
    }
    let grid = conv_of(ps, &x, &p.token_proj);
    let tokens = grid.reshape(&[16, 64]).unwrap();
    let pos = ps.get(p.pos_embed);
    let tokens = Tensor::from_fn(&[16, 64], |i| tokens.data()[i] + pos.data()[i]);
    let pooled = Tensor::from_fn(&[64], |c| (0..16).map(|r| tokens.data()[r * 64 + c]).sum::<f64>() / 16.0);
    let logits = dense_of(ps, &pooled, &p.head);
    let probs = ops::softmax(&logits).unwrap();
    let out = lvit_forward(&tile, &p, &cfg).unwrap();
    for c in 0..3 {
        assert!((out[c] - probs.data()[c]).abs() <= 1e-12);
    }
}

/// Loss and branch signature of the full model at `params`.
fn probe(tile: &Tensor, label: usize, params: &LVitParams, cfg: &LVitConfig) -> (f64, u64) {
    let mut t = Tape::with_params(&params.params);
    let x = t.constant(tile.clone());
    let probs = lvit(&mut t, x, params, cfg).unwrap();
    let loss = t.nll(probs, label, crate::train::PROB_FLOOR).unwrap();
    (t.value(loss).data()[0], t.branch_signature())
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    use rand::{Rng, SeedableRng};
    const H: f64 = 1e-4;
    let mut cfg = LVitConfig::full();
    for linear in [false, true] {
        cfg.linear_attention = linear;
        let p = LVitParams::init(&cfg, 2);
        let tile = rand_tile(6);
        let label = 1;
        let (_, grads) = loss_and_grads(&tile, label, &p, &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for id in p.params.ids() {
            let n = p.params.get(id).len();
            let mut checked = 0;
            let mut attempts = 0;
            while checked < 5 {
                attempts += 1;
                assert!(attempts < 50, "{}: no smooth coordinates", p.params.name(id));
                let i = rng.gen_range(0..n);
                let mut plus = p.clone();
                plus.params.get_mut(id).data_mut()[i] += H;
                let mut minus = p.clone();
                minus.params.get_mut(id).data_mut()[i] -= H;
                let (lp, sp) = probe(&tile, label, &plus, &cfg);
                let (lm, sm) = probe(&tile, label, &minus, &cfg);
                if sp != sm {
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * H);
                let analytic = grads[id.index()].data()[i];
                let err = relative_error(analytic, numeric, 1e-3);
                assert!(err <= 1e-3, "{} [{i}]: {analytic} vs {numeric}", p.params.name(id));
                checked += 1;
            }
        }
    }
}

#[test]
fn param_set_round_trip_through_layout() {
    let cfg = Variant::VtmDatSe.config();
    let p = LVitParams::init(&cfg, 12);
    let rebuilt = LVitParams::from_param_set(&cfg, p.params.clone()).unwrap();
    assert_eq!(rebuilt, p);
    assert!(LVitParams::from_param_set(&Variant::All.config(), p.params.clone()).is_err());
}

#[test]
fn variant_names_parse() {
    for v in Variant::ALL {
        assert_eq!(v.key().parse::<Variant>().unwrap(), v);
    }
    assert!("nope".parse::<Variant>().is_err());
}

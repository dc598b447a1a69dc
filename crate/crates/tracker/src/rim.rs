//! Reciprocating interaction between the template and search BEV features:
//! a top-down pass builds a multi-scale pyramid of cross-gated feature
//! pairs, and a bottom-up deformable-attention pass aggregates all scales
//! back into a motion-aware high-resolution pair.

use crate::config::RimConfig;
use crate::params::{Init, ParamSpec, Params};
use anyhow::{bail, Result};
use mtm_tensor::{PoolKind, Tape, Tensor, Var};
use std::f32::consts::PI;

/// One resolution level of the interaction pyramid.
pub struct LevelPair {
    /// Search-branch features H^s_i.
    pub search: Var,
    /// Template-branch features H^x_i.
    pub template: Var,
}

/// Cross-gated feature pairs at resolutions H/2^i for i < scale_layers.
pub struct FeaturePairPyramid {
    pub levels: Vec<LevelPair>,
}

/// Refined high-resolution pair plus attention snapshots for diagnostics.
pub struct RimOutputs {
    pub fx_hat: Var,
    pub fs_hat: Var,
    /// One softmax snapshot per head: rows are queries, columns the
    /// scale-and-point samples that head draws from.
    pub attention_probes: Vec<Tensor>,
}

/// Sampling-offset biases that fan the heads out in distinct directions,
/// with points stepping radially outward — so the untrained aggregator
/// already looks at a ring of context instead of a single cell.
fn spread_bias(cfg: &RimConfig) -> Tensor {
    let (heads, levels, k) = (cfg.heads, cfg.scale_layers, cfg.ref_points);
    let mut data = vec![0.0f32; heads * levels * k * 2];
    for head in 0..heads {
        let theta = 2.0 * PI * head as f32 / heads as f32;
        for level in 0..levels {
            for point in 0..k {
                let radius = 0.5 * (point + 1) as f32;
                let base = ((head * levels + level) * k + point) * 2;
                data[base] = radius * theta.cos();
                data[base + 1] = radius * theta.sin();
            }
        }
    }
    Tensor::new(&[heads * levels * k * 2], data).expect("spread bias")
}

/// Identity scaled by 1/heads, so summing the per-head projections of an
/// identical context reproduces that context exactly.
fn scaled_identity(dim: usize, heads: usize) -> Tensor {
    let inv = 1.0 / heads as f32;
    Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { inv } else { 0.0 })
}

pub fn param_specs(cfg: &RimConfig) -> Vec<ParamSpec> {
    let d = cfg.channels;
    let d2 = 2 * d;
    let (heads, levels, k) = (cfg.heads, cfg.scale_layers, cfg.ref_points);
    let mut specs = Vec::new();
    for i in 0..levels {
        // Both branches share the downsampling conv; the template carries a
        // footprint-mask channel and the search branch a zero channel.
        specs.push(ParamSpec::new(format!("rim.down{i}.weight"), &[3, 3, d + 1, d], Init::HeUniform));
        specs.push(ParamSpec::new(format!("rim.down{i}.bias"), &[d], Init::Zeros));
        specs.push(ParamSpec::new(format!("rim.iam{i}.weight"), &[1, 1, d2, d], Init::HeUniform));
        specs.push(ParamSpec::new(format!("rim.iam{i}.bias"), &[d], Init::Zeros));
    }
    // Zero offset/attention weights start the aggregator at the structured
    // biases: spread sampling points and a uniform distribution per head.
    specs.push(ParamSpec::new("rim.def.offset.weight", &[d2, heads * levels * k * 2], Init::Zeros));
    specs.push(ParamSpec::new("rim.def.offset.bias", &[heads * levels * k * 2], Init::Explicit(spread_bias(cfg))));
    specs.push(ParamSpec::new("rim.def.attn.weight", &[d2, heads * levels * k], Init::Zeros));
    specs.push(ParamSpec::new("rim.def.attn.bias", &[heads * levels * k], Init::Zeros));
    for head in 0..heads {
        specs.push(ParamSpec::new(format!("rim.def.head{head}.weight"), &[d2, d2], Init::Explicit(scaled_identity(d2, heads))));
    }
    specs
}

/// Channel gate of one feature map: global average and max pools are
/// concatenated, mixed by a 1×1 conv, and squashed to (0, 1).
pub fn iam_gate(tape: &mut Tape, f: Var, params: &Params, level: usize) -> Result<Var> {
    let avg = tape.global_pool(f, PoolKind::Avg)?;
    let max = tape.global_pool(f, PoolKind::Max)?;
    let pooled = tape.concat_last(&[avg, max])?;
    let w = params.var(&format!("rim.iam{level}.weight"))?;
    let b = params.var(&format!("rim.iam{level}.bias"))?;
    let mixed = tape.conv2d(pooled, w, Some(b), 1, 0)?;
    let gate = tape.sigmoid(mixed)?;
    let c = tape.value(gate).numel();
    Ok(tape.reshape(gate, &[c])?)
}

/// Cross-applied channel reweighting with residuals: each branch is scaled
/// by the *other* branch's gate, then added back onto itself.
pub fn iam_cross(tape: &mut Tape, fx: Var, fs: Var, params: &Params, level: usize) -> Result<(Var, Var)> {
    if tape.value(fx).shape() != tape.value(fs).shape() {
        bail!(
            "iam_cross branch shapes differ: {:?} vs {:?}",
            tape.value(fx).shape(),
            tape.value(fs).shape()
        );
    }
    let gate_x = iam_gate(tape, fx, params, level)?;
    let gate_s = iam_gate(tape, fs, params, level)?;
    let hs = {
        let scaled = tape.mul_channel(fs, gate_x)?;
        tape.add(scaled, fs)?
    };
    let hx = {
        let scaled = tape.mul_channel(fx, gate_s)?;
        tape.add(scaled, fx)?
    };
    Ok((hs, hx))
}

/// Top-down pass: each level applies a shared stride-2^i conv block to the
/// mask-augmented template and the zero-padded search input, then swaps
/// channel gates between the branches.
pub fn top_down(tape: &mut Tape, fx_masked: Var, fs: Var, params: &Params, cfg: &RimConfig) -> Result<FeaturePairPyramid> {
    let xs = tape.value(fx_masked).shape().to_vec();
    let ss = tape.value(fs).shape().to_vec();
    if xs.len() != 3 || xs[2] != cfg.channels + 1 {
        bail!("template input must be [H, L, D+1], got {xs:?}");
    }
    if ss.len() != 3 || ss[..2] != xs[..2] || ss[2] != cfg.channels {
        bail!("search input must be [H, L, D] matching the template, got {ss:?}");
    }
    // The search branch gets a zero channel so the conv weights can be
    // shared with the mask-bearing template branch.
    let zeros = tape.constant(Tensor::zeros(&[ss[0], ss[1], 1]));
    let s_in = tape.concat_last(&[fs, zeros])?;

    let mut levels = Vec::with_capacity(cfg.scale_layers);
    for i in 0..cfg.scale_layers {
        let stride = 1 << i;
        let w = params.var(&format!("rim.down{i}.weight"))?;
        let b = params.var(&format!("rim.down{i}.bias"))?;
        let x_conv = tape.conv2d(fx_masked, w, Some(b), stride, 1)?;
        let x_i = tape.relu(x_conv)?;
        let s_conv = tape.conv2d(s_in, w, Some(b), stride, 1)?;
        let s_i = tape.relu(s_conv)?;
        let (search, template) = iam_cross(tape, x_i, s_i, params, i)?;
        levels.push(LevelPair { search, template });
    }
    Ok(FeaturePairPyramid { levels })
}

/// Interpolation footprint of one sample point; mirrors the tape's
/// bilinear sampling exactly (border-clamped, with the coordinate gradient
/// gated off wherever the clamp makes the output locally constant).
struct Taps {
    i0: usize,
    j0: usize,
    du: f32,
    dv: f32,
    active_u: f32,
    active_v: f32,
}

fn taps(u: f32, v: f32, h: usize, w: usize) -> Taps {
    let max_u = (h - 1) as f32;
    let max_v = (w - 1) as f32;
    let cu = u.clamp(0.0, max_u);
    let cv = v.clamp(0.0, max_v);
    let i0 = if h >= 2 { (cu.floor() as usize).min(h - 2) } else { 0 };
    let j0 = if w >= 2 { (cv.floor() as usize).min(w - 2) } else { 0 };
    Taps {
        i0,
        j0,
        du: if h >= 2 { cu - i0 as f32 } else { 0.0 },
        dv: if w >= 2 { cv - j0 as f32 } else { 0.0 },
        active_u: if (0.0..=max_u).contains(&u) && h >= 2 { 1.0 } else { 0.0 },
        active_v: if (0.0..=max_v).contains(&v) && w >= 2 { 1.0 } else { 0.0 },
    }
}

struct TapWeights {
    base00: usize,
    base01: usize,
    base10: usize,
    base11: usize,
    w00: f32,
    w01: f32,
    w10: f32,
    w11: f32,
}

fn tap_weights(t: &Taps, h: usize, w: usize, c: usize) -> TapWeights {
    let base00 = (t.i0 * w + t.j0) * c;
    let base01 = base00 + if w >= 2 { c } else { 0 };
    let base10 = base00 + if h >= 2 { w * c } else { 0 };
    TapWeights {
        base00,
        base01,
        base10,
        base11: base10 + if w >= 2 { c } else { 0 },
        w00: (1.0 - t.du) * (1.0 - t.dv),
        w01: (1.0 - t.du) * t.dv,
        w10: t.du * (1.0 - t.dv),
        w11: t.du * t.dv,
    }
}

/// Weighted multi-point sampling in one tape node: for each query row,
/// bilinearly samples `f` at that query's `k` coordinate rows and combines
/// them with the query's weight row.
///
/// `f: [H, W, C]`, `coords: [P·K, 2]` (row, col in cell units, query-major),
/// `weights: [P, K]` → `[P, C]`. Gradients flow into all three inputs.
pub fn deform_sample(tape: &mut Tape, f: Var, coords: Var, weights: Var) -> mtm_tensor::Result<Var> {
    let fshape = tape.value(f).shape().to_vec();
    let cshape = tape.value(coords).shape().to_vec();
    let wshape = tape.value(weights).shape().to_vec();
    if fshape.len() != 3 {
        return Err(mtm_tensor::TensorError::shape("deform_sample", format!("map {fshape:?}")));
    }
    if wshape.len() != 2 || cshape.len() != 2 || cshape[1] != 2 || cshape[0] != wshape[0] * wshape[1] {
        return Err(mtm_tensor::TensorError::shape(
            "deform_sample",
            format!("coords {cshape:?} vs weights {wshape:?}"),
        ));
    }
    let (h, w, c) = (fshape[0], fshape[1], fshape[2]);
    if h == 0 || w == 0 {
        return Err(mtm_tensor::TensorError::invalid("deform_sample", "empty map"));
    }
    let (p, k) = (wshape[0], wshape[1]);

    let fs = tape.value(f).data();
    let cs = tape.value(coords).data();
    let ws = tape.value(weights).data();
    let mut data = vec![0.0f32; p * c];
    for q in 0..p {
        for ch in 0..c {
            let mut acc = 0.0f64;
            for s in 0..k {
                let row = q * k + s;
                let t = taps(cs[2 * row], cs[2 * row + 1], h, w);
                let tw = tap_weights(&t, h, w, c);
                let sample = tw.w00 * fs[tw.base00 + ch]
                    + tw.w01 * fs[tw.base01 + ch]
                    + tw.w10 * fs[tw.base10 + ch]
                    + tw.w11 * fs[tw.base11 + ch];
                acc += (ws[row] * sample) as f64;
            }
            data[q * c + ch] = acc as f32;
        }
    }
    let out = Tensor::new(&[p, c], data)?;
    tape.custom_op("deform_sample", &[f, coords, weights], out, move |bp| {
        let (vals, g, mut bufs) = bp.split();
        let fs = vals.get(f).data();
        let cs = vals.get(coords).data();
        let ws = vals.get(weights).data();
        if let Some(df) = bufs.get(f) {
            for q in 0..p {
                for s in 0..k {
                    let row = q * k + s;
                    let t = taps(cs[2 * row], cs[2 * row + 1], h, w);
                    let tw = tap_weights(&t, h, w, c);
                    let wgt = ws[row];
                    for ch in 0..c {
                        let gv = wgt * g[q * c + ch];
                        df[tw.base00 + ch] += tw.w00 * gv;
                        df[tw.base01 + ch] += tw.w01 * gv;
                        df[tw.base10 + ch] += tw.w10 * gv;
                        df[tw.base11 + ch] += tw.w11 * gv;
                    }
                }
            }
        }
        if let Some(dc) = bufs.get(coords) {
            for q in 0..p {
                for s in 0..k {
                    let row = q * k + s;
                    let t = taps(cs[2 * row], cs[2 * row + 1], h, w);
                    let tw = tap_weights(&t, h, w, c);
                    let wgt = ws[row];
                    let mut gu = 0.0f32;
                    let mut gv = 0.0f32;
                    for ch in 0..c {
                        let gval = wgt * g[q * c + ch];
                        gu += gval
                            * ((1.0 - t.dv) * (fs[tw.base10 + ch] - fs[tw.base00 + ch])
                                + t.dv * (fs[tw.base11 + ch] - fs[tw.base01 + ch]));
                        gv += gval
                            * ((1.0 - t.du) * (fs[tw.base01 + ch] - fs[tw.base00 + ch])
                                + t.du * (fs[tw.base11 + ch] - fs[tw.base10 + ch]));
                    }
                    dc[2 * row] += gu * t.active_u;
                    dc[2 * row + 1] += gv * t.active_v;
                }
            }
        }
        if let Some(dw) = bufs.get(weights) {
            for q in 0..p {
                for s in 0..k {
                    let row = q * k + s;
                    let t = taps(cs[2 * row], cs[2 * row + 1], h, w);
                    let tw = tap_weights(&t, h, w, c);
                    let mut acc = 0.0f32;
                    for ch in 0..c {
                        let sample = tw.w00 * fs[tw.base00 + ch]
                            + tw.w01 * fs[tw.base01 + ch]
                            + tw.w10 * fs[tw.base10 + ch]
                            + tw.w11 * fs[tw.base11 + ch];
                        acc += g[q * c + ch] * sample;
                    }
                    dw[row] += acc;
                }
            }
        }
    })
}

/// Each query's reference coordinate at one pyramid level, repeated per
/// sampled point: the query's own normalized cell-center location, mapped
/// into that level's cell units.
fn base_coords(h0: usize, w0: usize, h_i: usize, w_i: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(h0 * w0 * k * 2);
    for qi in 0..h0 {
        for qj in 0..w0 {
            let u = (qi as f32 + 0.5) / h0 as f32;
            let v = (qj as f32 + 0.5) / w0 as f32;
            for _ in 0..k {
                data.push(u * h_i as f32 - 0.5);
                data.push(v * w_i as f32 - 0.5);
            }
        }
    }
    Tensor::new(&[h0 * w0 * k * 2 / 2, 2], data).expect("base coords")
}

/// Bottom-up pass: every level-0 cell queries all pyramid levels through
/// learned per-head sampling offsets and softmax-normalized point weights,
/// and the per-head contexts are mixed and summed back to 2D channels.
/// The refined level-0 map splits into (F̂^x, F̂^s) by concatenation order.
pub fn deformable_aggregate(
    tape: &mut Tape,
    pyramid: &FeaturePairPyramid,
    params: &Params,
    cfg: &RimConfig,
) -> Result<(Var, Var, Vec<Tensor>)> {
    if pyramid.levels.len() != cfg.scale_layers {
        bail!("pyramid has {} levels, config wants {}", pyramid.levels.len(), cfg.scale_layers);
    }
    let d = cfg.channels;
    let d2 = 2 * d;
    let (heads, n_levels, k) = (cfg.heads, cfg.scale_layers, cfg.ref_points);

    // Search channels come first in every concatenated pair.
    let mut cat = Vec::with_capacity(n_levels);
    let mut extents = Vec::with_capacity(n_levels);
    for pair in &pyramid.levels {
        let joined = tape.concat_last(&[pair.search, pair.template])?;
        let sh = tape.value(joined).shape().to_vec();
        extents.push((sh[0], sh[1]));
        cat.push(joined);
    }
    let (h0, w0) = extents[0];
    let p = h0 * w0;
    let queries = tape.reshape(cat[0], &[p, d2])?;

    let off_w = params.var("rim.def.offset.weight")?;
    let off_b = params.var("rim.def.offset.bias")?;
    let off_lin = tape.matmul(queries, off_w)?;
    let off_out = tape.add_channel(off_lin, off_b)?;
    let attn_w = params.var("rim.def.attn.weight")?;
    let attn_b = params.var("rim.def.attn.bias")?;
    let attn_lin = tape.matmul(queries, attn_w)?;
    let attn_out = tape.add_channel(attn_lin, attn_b)?;

    let bases: Vec<Var> = extents
        .iter()
        .map(|&(h_i, w_i)| tape.constant(base_coords(h0, w0, h_i, w_i, k)))
        .collect();

    let mut probes = Vec::with_capacity(heads);
    let mut total: Option<Var> = None;
    for head in 0..heads {
        let logits = tape.narrow_last(attn_out, head * n_levels * k, n_levels * k)?;
        let weights = tape.softmax(logits, 1)?;
        probes.push(tape.value(weights).clone());
        let mut ctx: Option<Var> = None;
        for i in 0..n_levels {
            let w_ik = tape.narrow_last(weights, i * k, k)?;
            let off = tape.narrow_last(off_out, ((head * n_levels + i) * k) * 2, k * 2)?;
            let off = tape.reshape(off, &[p * k, 2])?;
            let coords = tape.add(off, bases[i])?;
            let sampled = deform_sample(tape, cat[i], coords, w_ik)?;
            ctx = Some(match ctx {
                None => sampled,
                Some(acc) => tape.add(acc, sampled)?,
            });
        }
        let mix = params.var(&format!("rim.def.head{head}.weight"))?;
        let mixed = tape.matmul(ctx.expect("scale_layers >= 1"), mix)?;
        total = Some(match total {
            None => mixed,
            Some(acc) => tape.add(acc, mixed)?,
        });
    }
    let full = tape.reshape(total.expect("heads >= 1"), &[h0, w0, d2])?;
    let fs_hat = tape.narrow_last(full, 0, d)?;
    let fx_hat = tape.narrow_last(full, d, d)?;
    Ok((fx_hat, fs_hat, probes))
}

/// Full module: mask-augment the template, run the top-down gated pyramid,
/// then aggregate all scales back to high resolution.
pub fn rim_forward(
    tape: &mut Tape,
    fx: Var,
    mask: Var,
    fs: Var,
    params: &Params,
    cfg: &RimConfig,
) -> Result<RimOutputs> {
    let fx_masked = tape.concat_last(&[fx, mask])?;
    let pyramid = top_down(tape, fx_masked, fs, params, cfg)?;
    let (fx_hat, fs_hat, attention_probes) = deformable_aggregate(tape, &pyramid, params, cfg)?;
    Ok(RimOutputs { fx_hat, fs_hat, attention_probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::materialize;
    use mtm_tensor::gradcheck::{
        grad_check, grad_check_with_step, COMPOSITE_ABS_TOL, COMPOSITE_STEP, DEFAULT_ABS_TOL, DEFAULT_REL_TOL,
    };
    use mtm_tensor::WeightStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random-sign reduction: keeps per-element gradients at O(1) while the
    /// loss magnitude (and with it the finite-difference round-off) grows
    /// only like √n instead of n.
    fn signed_sum(t: &mut Tape, x: Var, seed: u64) -> mtm_tensor::Result<Var> {
        let shape = t.value(x).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(Tensor::from_fn(&shape, |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }));
        let p = t.mul(x, w)?;
        t.sum_all(p)
    }

    fn tiny_cfg() -> RimConfig {
        RimConfig { channels: 4, scale_layers: 3, heads: 2, ref_points: 2 }
    }

    fn store_for(cfg: &RimConfig, seed: u64) -> WeightStore {
        let mut store = WeightStore::new();
        materialize(&param_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed), &mut store);
        store
    }

    fn random_map(shape: &[usize], seed: u64, scale: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    #[test]
    fn gate_stays_in_unit_interval_and_zero_conv_gives_half() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 3);
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let f = tape.constant(random_map(&[6, 5, 4], 9, 2.0));
        let g = iam_gate(&mut tape, f, &params, 0).unwrap();
        let gt = tape.value(g);
        assert_eq!(gt.shape(), &[4]);
        assert!(gt.data().iter().all(|v| *v > 0.0 && *v < 1.0));

        let mut zeroed = WeightStore::new();
        materialize(&param_specs(&cfg), &mut ChaCha8Rng::seed_from_u64(3), &mut zeroed);
        zeroed.insert("rim.iam0.weight", Tensor::zeros(&[1, 1, 8, 4]));
        let mut tape2 = Tape::new();
        let params2 = Params::bind_trainable(&mut tape2, &zeroed);
        let f2 = tape2.constant(random_map(&[6, 5, 4], 9, 2.0));
        let g2 = iam_gate(&mut tape2, f2, &params2, 0).unwrap();
        assert!(tape2.value(g2).data().iter().all(|v| (*v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn saturated_gates_give_residual_only_and_doubling() {
        let cfg = tiny_cfg();
        for (bias, factor) in [(-30.0f32, 1.0f32), (30.0, 2.0)] {
            let mut store = store_for(&cfg, 4);
            store.insert("rim.iam0.weight", Tensor::zeros(&[1, 1, 8, 4]));
            store.insert("rim.iam0.bias", Tensor::full(&[4], bias));
            let mut tape = Tape::new();
            let params = Params::bind_trainable(&mut tape, &store);
            let fx = tape.constant(random_map(&[5, 5, 4], 11, 1.0));
            let fs = tape.constant(random_map(&[5, 5, 4], 12, 1.0));
            let (hs, hx) = iam_cross(&mut tape, fx, fs, &params, 0).unwrap();
            let fs_t = tape.value(fs).data().to_vec();
            let fx_t = tape.value(fx).data().to_vec();
            for (out, inp) in [(hs, fs_t), (hx, fx_t)] {
                for (o, i) in tape.value(out).data().iter().zip(&inp) {
                    assert!((o - factor * i).abs() < 1e-5, "{o} vs {factor}*{i}");
                }
            }
        }
    }

    #[test]
    fn swapping_inputs_swaps_outputs() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 5);
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let a = tape.constant(random_map(&[4, 6, 4], 21, 1.5));
        let b = tape.constant(random_map(&[4, 6, 4], 22, 1.5));
        let (hs, hx) = iam_cross(&mut tape, a, b, &params, 1).unwrap();
        let (hs2, hx2) = iam_cross(&mut tape, b, a, &params, 1).unwrap();
        assert_eq!(tape.value(hs2).data(), tape.value(hx).data());
        assert_eq!(tape.value(hx2).data(), tape.value(hs).data());
    }

    #[test]
    fn mismatched_branch_shapes_are_rejected() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 5);
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let a = tape.constant(Tensor::zeros(&[4, 6, 4]));
        let b = tape.constant(Tensor::zeros(&[4, 5, 4]));
        let err = iam_cross(&mut tape, a, b, &params, 0).unwrap_err();
        assert!(err.to_string().contains("shapes differ"));
    }

    #[test]
    fn pyramid_halves_resolution_per_level() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 6);
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let fx = tape.constant(random_map(&[16, 16, 5], 31, 1.0));
        let fs = tape.constant(random_map(&[16, 16, 4], 32, 1.0));
        let pyr = top_down(&mut tape, fx, fs, &params, &cfg).unwrap();
        assert_eq!(pyr.levels.len(), 3);
        for (i, want) in [(0usize, 16usize), (1, 8), (2, 4)] {
            assert_eq!(tape.value(pyr.levels[i].search).shape(), &[want, want, 4]);
            assert_eq!(tape.value(pyr.levels[i].template).shape(), &[want, want, 4]);
        }
    }

    #[test]
    fn zero_inputs_give_zero_pyramid() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 7);
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let fx = tape.constant(Tensor::zeros(&[8, 8, 5]));
        let fs = tape.constant(Tensor::zeros(&[8, 8, 4]));
        let pyr = top_down(&mut tape, fx, fs, &params, &cfg).unwrap();
        for pair in &pyr.levels {
            assert!(tape.value(pair.search).data().iter().all(|v| *v == 0.0));
            assert!(tape.value(pair.template).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn template_mask_is_not_ignored() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 8);
        let run = |mask_value: f32| {
            let mut tape = Tape::no_grad();
            let params = Params::bind_frozen(&mut tape, &store);
            let fx = tape.constant(random_map(&[8, 8, 4], 41, 1.0));
            let mask = tape.constant(Tensor::full(&[8, 8, 1], mask_value));
            let fs = tape.constant(random_map(&[8, 8, 4], 42, 1.0));
            let out = rim_forward(&mut tape, fx, mask, fs, &params, &cfg).unwrap();
            tape.value(out.fx_hat).data().to_vec()
        };
        assert_ne!(run(0.0), run(1.0));
    }

    #[test]
    fn attention_weights_sum_to_one_per_head() {
        let cfg = RimConfig { channels: 4, scale_layers: 3, heads: 4, ref_points: 4 };
        let store = store_for(&cfg, 9);
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let fx = tape.constant(random_map(&[8, 8, 4], 51, 1.0));
        let mask = tape.constant(Tensor::full(&[8, 8, 1], 1.0));
        let fs = tape.constant(random_map(&[8, 8, 4], 52, 1.0));
        let out = rim_forward(&mut tape, fx, mask, fs, &params, &cfg).unwrap();
        assert_eq!(out.attention_probes.len(), 4);
        for probe in &out.attention_probes {
            assert_eq!(probe.shape(), &[64, 12]);
            for row in probe.data().chunks(12) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn untrained_single_scale_aggregate_is_identity() {
        // Zero offsets + uniform weights sample each query's own cell, and
        // the identity/heads mixes sum back to the input pair exactly.
        let cfg = RimConfig { channels: 3, scale_layers: 1, heads: 4, ref_points: 4 };
        let mut store = store_for(&cfg, 10);
        store.insert("rim.def.offset.bias", Tensor::zeros(&[4 * 4 * 2]));
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let search = tape.constant(random_map(&[6, 7, 3], 61, 1.0));
        let template = tape.constant(random_map(&[6, 7, 3], 62, 1.0));
        let pyr = FeaturePairPyramid { levels: vec![LevelPair { search, template }] };
        let (fx_hat, fs_hat, _) = deformable_aggregate(&mut tape, &pyr, &params, &cfg).unwrap();
        for (out, inp) in [(fx_hat, template), (fs_hat, search)] {
            for (o, i) in tape.value(out).data().iter().zip(tape.value(inp).data()) {
                assert!((o - i).abs() < 1e-5, "{o} vs {i}");
            }
        }
    }

    #[test]
    fn deform_sample_with_one_unit_weight_matches_bilinear() {
        let mut tape = Tape::new();
        let f = tape.constant(random_map(&[5, 6, 3], 71, 1.0));
        let coords_t = Tensor::new(&[4, 2], vec![0.3, 1.7, 2.5, 4.9, -1.0, 2.0, 4.4, 0.2]).unwrap();
        let coords = tape.constant(coords_t.clone());
        let ones = tape.constant(Tensor::full(&[4, 1], 1.0));
        let via_deform = deform_sample(&mut tape, f, coords, ones).unwrap();
        let coords2 = tape.constant(coords_t);
        let via_bilinear = tape.bilinear_sample(f, coords2).unwrap();
        let a = tape.value(via_deform).data().to_vec();
        let b = tape.value(via_bilinear).data();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn deform_sample_rejects_inconsistent_shapes() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[4, 4, 2]));
        let coords = tape.constant(Tensor::zeros(&[6, 2]));
        let weights = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(deform_sample(&mut tape, f, coords, weights).is_err());
    }

    #[test]
    fn deform_sample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for (h, w, c, p, k) in [(5usize, 4usize, 3usize, 3usize, 2usize), (4, 6, 2, 4, 3), (3, 3, 4, 2, 1)] {
            let f = random_map(&[h, w, c], rng.gen(), 1.0);
            // Interior points with fractional parts well away from the
            // integer lattice: the interpolant has derivative kinks at whole
            // coordinates, where finite differences are meaningless.
            let coords = Tensor::from_fn(&[p * k, 2], |i| {
                let extent = if i % 2 == 0 { h } else { w };
                rng.gen_range(0..extent - 1) as f32 + rng.gen_range(0.2..0.8)
            });
            let weights = random_map(&[p, k], rng.gen(), 1.0);
            let report = grad_check(
                "deform_sample",
                &[f, coords, weights],
                DEFAULT_REL_TOL,
                DEFAULT_ABS_TOL,
                |t, v| {
                    let out = deform_sample(t, v[0], v[1], v[2])?;
                    t.sum_all(out)
                },
            );
            assert!(report.passed, "{report:?}");
        }
    }

    /// Random map with one strictly dominant cell per channel, so a ±h probe
    /// can never flip which cell the max pool routes its gradient through.
    fn peaked_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-0.5..0.5));
        let data = t.data_mut();
        for ch in 0..c {
            let cell = (ch % h) * w + (ch + 1) % w;
            data[cell * c + ch] = 2.0 + 0.25 * ch as f32;
        }
        t
    }

    #[test]
    fn iam_gradients_match_finite_differences() {
        for (h, w, d, seed) in [(5usize, 5usize, 3usize, 91u64), (4, 7, 2, 92), (6, 3, 4, 93)] {
            let cfg = RimConfig { channels: d, scale_layers: 1, heads: 1, ref_points: 1 };
            let store = store_for(&cfg, seed);
            let names: Vec<String> = store.names().cloned().collect();
            let mut inputs = vec![peaked_map(h, w, d, seed + 10), peaked_map(h, w, d, seed + 11)];
            inputs.extend(store.iter().map(|(_, t)| t.clone()));
            let report = grad_check_with_step(
                "iam_cross",
                &inputs,
                DEFAULT_REL_TOL,
                COMPOSITE_ABS_TOL,
                COMPOSITE_STEP,
                move |t, v| -> Result<Var> {
                    let params = Params::from_pairs(names.iter().cloned().zip(v[2..].iter().copied()));
                    let (hs, hx) = iam_cross(t, v[0], v[1], &params, 0)?;
                    // Distinct sign patterns so the two outputs cannot mask
                    // each other's errors.
                    let a = signed_sum(t, hs, seed + 20)?;
                    let b = signed_sum(t, hx, seed + 21)?;
                    Ok(t.add(a, b)?)
                },
            );
            assert!(report.passed, "{report:?}");
        }
    }

    /// Weights for a top-down stack whose forward pass is smooth around the
    /// probe point: small conv weights under a positive bias keep every
    /// pre-ReLU value strictly positive (|w·x| ≤ 27·0.008·0.8 + probe shifts
    /// < 0.25), and the gate rows reading the max-pool half are zeroed
    /// because a ±h probe can flip the argmax mid-difference. The max path
    /// itself is validated in the interaction-gate check, where a dominant
    /// cell is planted instead.
    fn smooth_top_down_store(cfg: &RimConfig, seed: u64) -> WeightStore {
        let d = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for i in 0..cfg.scale_layers {
            store.insert(
                format!("rim.down{i}.weight"),
                Tensor::from_fn(&[3, 3, d + 1, d], |_| rng.gen_range(-0.008..0.008)),
            );
            store.insert(format!("rim.down{i}.bias"), Tensor::full(&[d], 0.25));
            store.insert(
                format!("rim.iam{i}.weight"),
                Tensor::from_fn(&[1, 1, 2 * d, d], |idx| {
                    if idx / d < d { rng.gen_range(-0.5..0.5) } else { 0.0 }
                }),
            );
            store.insert(format!("rim.iam{i}.bias"), Tensor::from_fn(&[d], |_| rng.gen_range(-0.2..0.2)));
        }
        store
    }

    #[test]
    fn top_down_gradients_match_finite_differences() {
        for (n, d, layers, seed) in [(16usize, 2usize, 3usize, 101u64), (12, 3, 2, 104), (8, 2, 3, 107)] {
            let cfg = RimConfig { channels: d, scale_layers: layers, heads: 1, ref_points: 1 };
            let store = smooth_top_down_store(&cfg, seed);
            let names: Vec<String> = store.names().cloned().collect();
            let mut inputs = vec![random_map(&[n, n, d + 1], seed + 1, 0.8), random_map(&[n, n, d], seed + 2, 0.8)];
            inputs.extend(store.iter().map(|(_, t)| t.clone()));
            let cfg2 = cfg.clone();
            let report = grad_check_with_step(
                "top_down",
                &inputs,
                DEFAULT_REL_TOL,
                COMPOSITE_ABS_TOL,
                COMPOSITE_STEP,
                move |t, v| -> Result<Var> {
                    let params = Params::from_pairs(names.iter().cloned().zip(v[2..].iter().copied()));
                    let pyr = top_down(t, v[0], v[1], &params, &cfg2)?;
                    let mut loss: Option<Var> = None;
                    for (i, pair) in pyr.levels.iter().enumerate() {
                        let s = signed_sum(t, pair.search, seed + 30 + i as u64)?;
                        let x = signed_sum(t, pair.template, seed + 40 + i as u64)?;
                        let lvl = t.add(s, x)?;
                        loss = Some(match loss {
                            None => lvl,
                            Some(acc) => t.add(acc, lvl)?,
                        });
                    }
                    Ok(loss.expect("levels"))
                },
            );
            assert!(report.passed, "n={n}: {report:?}");
        }
    }

    #[test]
    fn deformable_aggregate_gradients_match_finite_differences() {
        // Sampling coordinates are base + W·q + bias. A +0.5 bias with tiny
        // offset weights (|W·q| ≤ 6·0.02·1 = 0.12) keeps every coordinate's
        // fractional part ≥ 0.13 from the integer lattice and from the map
        // edges, where the interpolant is not differentiable — so the check
        // probes the offset branch at honestly non-integer points.
        for seed in [111u64, 211, 311] {
            let cfg = RimConfig { channels: 3, scale_layers: 2, heads: 2, ref_points: 2 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let slots = cfg.heads * cfg.scale_layers * cfg.ref_points;
            let d2 = 2 * cfg.channels;
            let mut store_tensors: Vec<(String, Tensor)> = vec![
                ("rim.def.offset.weight".into(), Tensor::from_fn(&[d2, slots * 2], |_| rng.gen_range(-0.02..0.02))),
                ("rim.def.offset.bias".into(), Tensor::full(&[slots * 2], 0.5)),
                ("rim.def.attn.weight".into(), Tensor::from_fn(&[d2, slots], |_| rng.gen_range(-0.3..0.3))),
                ("rim.def.attn.bias".into(), Tensor::from_fn(&[slots], |_| rng.gen_range(-0.3..0.3))),
            ];
            for head in 0..cfg.heads {
                store_tensors.push((
                    format!("rim.def.head{head}.weight"),
                    Tensor::from_fn(&[d2, d2], |_| rng.gen_range(-0.4..0.4)),
                ));
            }
            let names: Vec<String> = store_tensors.iter().map(|(n, _)| n.clone()).collect();
            let mut inputs = vec![
                random_map(&[6, 6, 3], seed + 1, 1.0),
                random_map(&[6, 6, 3], seed + 2, 1.0),
                random_map(&[3, 3, 3], seed + 3, 1.0),
                random_map(&[3, 3, 3], seed + 4, 1.0),
            ];
            inputs.extend(store_tensors.iter().map(|(_, t)| t.clone()));
            let cfg2 = cfg.clone();
            let report = grad_check_with_step(
                "deformable_aggregate",
                &inputs,
                DEFAULT_REL_TOL,
                COMPOSITE_ABS_TOL,
                COMPOSITE_STEP,
                move |t, v| -> Result<Var> {
                    let params = Params::from_pairs(names.iter().cloned().zip(v[4..].iter().copied()));
                    let pyr = FeaturePairPyramid {
                        levels: vec![
                            LevelPair { search: v[0], template: v[1] },
                            LevelPair { search: v[2], template: v[3] },
                        ],
                    };
                    let (fx_hat, fs_hat, _) = deformable_aggregate(t, &pyr, &params, &cfg2)?;
                    let a = signed_sum(t, fx_hat, seed + 5)?;
                    let b = signed_sum(t, fs_hat, seed + 6)?;
                    Ok(t.add(a, b)?)
                },
            );
            assert!(report.passed, "seed={seed}: {report:?}");
        }
    }

    #[test]
    fn level0_outputs_shift_with_wrapped_inputs() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 121);
        let (h, w, d) = (16usize, 16usize, 4usize);
        // A two-cell zero ring keeps all conv support clear of the border,
        // so a one-cell wrap shift moves the responses exactly.
        let interior = |i: usize, j: usize| (2..h - 2).contains(&i) && (2..w - 2).contains(&j);
        let mut rng = ChaCha8Rng::seed_from_u64(122);
        let fx = Tensor::from_fn(&[h, w, d], |idx| {
            let (i, j) = (idx / (w * d), (idx / d) % w);
            if interior(i, j) { rng.gen_range(-1.0..1.0) } else { 0.0 }
        });
        let fs = Tensor::from_fn(&[h, w, d], |idx| {
            let (i, j) = (idx / (w * d), (idx / d) % w);
            if interior(i, j) { rng.gen_range(-1.0..1.0) } else { 0.0 }
        });
        let mask = Tensor::from_fn(&[h, w, 1], |idx| {
            let (i, j) = (idx / w, idx % w);
            if (5..9).contains(&i) && (5..9).contains(&j) { 1.0 } else { 0.0 }
        });
        let shift = |t: &Tensor, c: usize| {
            Tensor::from_fn(&[h, w, c], |idx| {
                let (i, j, ch) = (idx / (w * c), (idx / c) % w, idx % c);
                let (si, sj) = ((i + h - 1) % h, (j + w - 1) % w);
                t.data()[(si * w + sj) * c + ch]
            })
        };

        let run = |fx_t: Tensor, mask_t: Tensor, fs_t: Tensor| {
            let mut tape = Tape::no_grad();
            let params = Params::bind_frozen(&mut tape, &store);
            let fx_v = tape.constant(fx_t);
            let mask_v = tape.constant(mask_t);
            let fx_masked = tape.concat_last(&[fx_v, mask_v]).unwrap();
            let fs_v = tape.constant(fs_t);
            let pyr = top_down(&mut tape, fx_masked, fs_v, &params, &cfg).unwrap();
            (
                tape.value(pyr.levels[0].search).data().to_vec(),
                tape.value(pyr.levels[0].template).data().to_vec(),
            )
        };
        let (s0, x0) = run(fx.clone(), mask.clone(), fs.clone());
        let (s1, x1) = run(shift(&fx, d), shift(&mask, 1), shift(&fs, d));
        for (orig, moved) in [(s0, s1), (x0, x1)] {
            for i in 2..h - 1 {
                for j in 2..w - 1 {
                    for ch in 0..d {
                        let a = orig[((i - 1) * w + (j - 1)) * d + ch];
                        let b = moved[(i * w + j) * d + ch];
                        assert!((a - b).abs() < 1e-4, "cell ({i},{j},{ch}): {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 131);
        let run = || {
            let mut tape = Tape::no_grad();
            let params = Params::bind_frozen(&mut tape, &store);
            let fx = tape.constant(random_map(&[8, 8, 4], 132, 1.0));
            let mask = tape.constant(Tensor::full(&[8, 8, 1], 1.0));
            let fs = tape.constant(random_map(&[8, 8, 4], 133, 1.0));
            let out = rim_forward(&mut tape, fx, mask, fs, &params, &cfg).unwrap();
            (tape.value(out.fx_hat).data().to_vec(), tape.value(out.fs_hat).data().to_vec())
        };
        assert_eq!(run(), run());
    }
}

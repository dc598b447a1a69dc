//! Stage II refinement: a 4-D correlation volume between the refined
//! template and search features, a radius-bounded correlation lookup at the
//! current motion estimate, an iteratively applied shared-weight update
//! block, per-cell z / heading regression heads, and the training losses.

use crate::config::{IrmConfig, RegionConfig};
use crate::geometry::{track_to_world_point, wrap_angle, OrientedBox3D};
use crate::params::{Init, ParamSpec, Params};
use anyhow::{bail, Result};
use mtm_tensor::{Tape, Tensor, TensorError, Var};

/// Per-cell absolute regression targets decoded from the search features.
pub struct RegressionMaps {
    /// Vertical position of the target in the template frame, H×L×1 meters.
    pub z_map: Var,
    /// Heading relative to the template frame, H×L×1 radians in (−π, π].
    pub theta_map: Var,
}

/// Loss terms of one training sample. The masked terms are absent when no
/// grid cell is occupied by the target footprint.
pub struct Losses {
    pub kp: Var,
    pub mt: Option<Var>,
    pub reg: Option<Var>,
    pub total: Var,
    pub n_pos: usize,
}

pub fn param_specs(cfg: &IrmConfig, channels: usize) -> Vec<ParamSpec> {
    let h = cfg.hidden;
    let window = (2 * cfg.radius + 1) * (2 * cfg.radius + 1);
    vec![
        ParamSpec::new("irm.corr.weight", &[1, 1, window, h], Init::HeUniform),
        ParamSpec::new("irm.corr.bias", &[h], Init::Zeros),
        ParamSpec::new("irm.motion.weight", &[3, 3, 2, h], Init::HeUniform),
        ParamSpec::new("irm.motion.bias", &[h], Init::Zeros),
        ParamSpec::new("irm.mix.weight", &[3, 3, 2 * h, h], Init::HeUniform),
        ParamSpec::new("irm.mix.bias", &[h], Init::Zeros),
        ParamSpec::new("irm.update1.weight", &[3, 3, h + 2, h], Init::HeUniform),
        ParamSpec::new("irm.update1.bias", &[h], Init::Zeros),
        // Near-zero update head: refinement starts as a small perturbation
        // of the stage-I estimate instead of destroying it.
        ParamSpec::new("irm.update2.weight", &[3, 3, h, 2], Init::Normal(0.01)),
        ParamSpec::new("irm.update2.bias", &[2], Init::Zeros),
        ParamSpec::new("heads.z1.weight", &[3, 3, channels, h], Init::HeUniform),
        ParamSpec::new("heads.z1.bias", &[h], Init::Zeros),
        ParamSpec::new("heads.z2.weight", &[3, 3, h, 1], Init::Normal(0.01)),
        ParamSpec::new("heads.z2.bias", &[1], Init::Zeros),
        ParamSpec::new("heads.yaw1.weight", &[3, 3, channels, h], Init::HeUniform),
        ParamSpec::new("heads.yaw1.bias", &[h], Init::Zeros),
        ParamSpec::new("heads.yaw2.weight", &[3, 3, h, 2], Init::Normal(0.01)),
        // (sin, cos) bias (0, 1): the untrained head decodes to heading 0.
        ParamSpec::new("heads.yaw2.bias", &[2], Init::Explicit(Tensor::new(&[2], vec![0.0, 1.0]).expect("bias"))),
    ]
}

/// Fills an H×L×2 motion map with the planar part of the stage-I motion;
/// gradients flow back into `v_xy` (shape [1, 2], meters).
pub fn init_motion(tape: &mut Tape, v_xy: Var, h: usize, l: usize) -> Result<Var> {
    let shape = tape.value(v_xy).shape().to_vec();
    if shape != [1, 2] {
        bail!("init_motion wants a [1, 2] planar motion, got {shape:?}");
    }
    let v2 = tape.reshape(v_xy, &[2])?;
    let ones = tape.constant(Tensor::full(&[h, l, 2], 1.0));
    Ok(tape.mul_channel(ones, v2)?)
}

/// All-pairs channel dot products between the two feature maps:
/// out[p, q] = ⟨fx[p], fs[q]⟩, shaped H×L×H×L, optionally scaled by 1/√D
/// to keep magnitudes O(1) regardless of channel count.
pub fn build_corr(tape: &mut Tape, fx: Var, fs: Var, scale: bool) -> Result<Var> {
    let xs = tape.value(fx).shape().to_vec();
    let ss = tape.value(fs).shape().to_vec();
    if xs.len() != 3 || xs != ss {
        bail!("build_corr wants matching [H, L, D] maps, got {xs:?} vs {ss:?}");
    }
    let (h, l, d) = (xs[0], xs[1], xs[2]);
    let p = h * l;
    let mut xf = tape.reshape(fx, &[p, d])?;
    if scale {
        xf = tape.scale(xf, 1.0 / (d as f32).sqrt())?;
    }
    let sf = tape.reshape(fs, &[p, d])?;
    let st = tape.transpose(sf)?;
    let w = tape.matmul(xf, st)?;
    Ok(tape.reshape(w, &[h, l, h, l])?)
}

struct Taps {
    k0: usize,
    l0: usize,
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
    let k0 = if h >= 2 { (cu.floor() as usize).min(h - 2) } else { 0 };
    let l0 = if w >= 2 { (cv.floor() as usize).min(w - 2) } else { 0 };
    Taps {
        k0,
        l0,
        du: if h >= 2 { cu - k0 as f32 } else { 0.0 },
        dv: if w >= 2 { cv - l0 as f32 } else { 0.0 },
        active_u: if (0.0..=max_u).contains(&u) && h >= 2 { 1.0 } else { 0.0 },
        active_v: if (0.0..=max_v).contains(&v) && w >= 2 { 1.0 } else { 0.0 },
    }
}

/// Samples the correlation volume around each cell's motion-displaced
/// position: for template cell p with motion m(p) (meters, converted to
/// cells), the output channel (δx+r)·(2r+1)+(δy+r) holds W[p, ·] bilinearly
/// interpolated at p + m(p)/cell + (δx, δy), border-clamped over the last
/// two volume dims. Gradients flow into both the volume and the motion map.
pub fn corr_lookup(
    tape: &mut Tape,
    w: Var,
    m: Var,
    radius: usize,
    cell_size: [f32; 2],
) -> mtm_tensor::Result<Var> {
    let ws = tape.value(w).shape().to_vec();
    let ms = tape.value(m).shape().to_vec();
    if ws.len() != 4 || ws[2] != ws[0] || ws[3] != ws[1] {
        return Err(TensorError::shape("corr_lookup", format!("volume {ws:?}")));
    }
    if ms.len() != 3 || ms[..2] != ws[..2] || ms[2] != 2 {
        return Err(TensorError::shape("corr_lookup", format!("motion {ms:?} vs volume {ws:?}")));
    }
    if cell_size.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(TensorError::invalid("corr_lookup", "cell size must be positive"));
    }
    let (h, l) = (ws[0], ws[1]);
    let side = 2 * radius + 1;
    let chans = side * side;
    let r = radius as isize;

    let wv = tape.value(w).data();
    let mv = tape.value(m).data();
    let mut data = vec![0.0f32; h * l * chans];
    for i in 0..h {
        for j in 0..l {
            let p = i * l + j;
            let base = p * h * l;
            let cu = i as f32 + mv[p * 2] / cell_size[0];
            let cv = j as f32 + mv[p * 2 + 1] / cell_size[1];
            for dx in -r..=r {
                for dy in -r..=r {
                    let t = taps(cu + dx as f32, cv + dy as f32, h, l);
                    let b00 = base + t.k0 * l + t.l0;
                    let b01 = b00 + usize::from(l >= 2);
                    let b10 = b00 + if h >= 2 { l } else { 0 };
                    let b11 = b10 + usize::from(l >= 2);
                    let c = ((dx + r) as usize) * side + (dy + r) as usize;
                    data[p * chans + c] = (1.0 - t.du) * (1.0 - t.dv) * wv[b00]
                        + (1.0 - t.du) * t.dv * wv[b01]
                        + t.du * (1.0 - t.dv) * wv[b10]
                        + t.du * t.dv * wv[b11];
                }
            }
        }
    }
    let out = Tensor::new(&[h, l, chans], data)?;
    tape.custom_op("corr_lookup", &[w, m], out, move |bp| {
        let (vals, g, mut bufs) = bp.split();
        let wv = vals.get(w).data();
        let mv = vals.get(m).data();
        if let Some(dw) = bufs.get(w) {
            for i in 0..h {
                for j in 0..l {
                    let p = i * l + j;
                    let base = p * h * l;
                    let cu = i as f32 + mv[p * 2] / cell_size[0];
                    let cv = j as f32 + mv[p * 2 + 1] / cell_size[1];
                    for dx in -r..=r {
                        for dy in -r..=r {
                            let t = taps(cu + dx as f32, cv + dy as f32, h, l);
                            let b00 = base + t.k0 * l + t.l0;
                            let b01 = b00 + usize::from(l >= 2);
                            let b10 = b00 + if h >= 2 { l } else { 0 };
                            let b11 = b10 + usize::from(l >= 2);
                            let c = ((dx + r) as usize) * side + (dy + r) as usize;
                            let gv = g[p * chans + c];
                            dw[b00] += (1.0 - t.du) * (1.0 - t.dv) * gv;
                            dw[b01] += (1.0 - t.du) * t.dv * gv;
                            dw[b10] += t.du * (1.0 - t.dv) * gv;
                            dw[b11] += t.du * t.dv * gv;
                        }
                    }
                }
            }
        }
        if let Some(dm) = bufs.get(m) {
            for i in 0..h {
                for j in 0..l {
                    let p = i * l + j;
                    let base = p * h * l;
                    let cu = i as f32 + mv[p * 2] / cell_size[0];
                    let cv = j as f32 + mv[p * 2 + 1] / cell_size[1];
                    let mut gu = 0.0f32;
                    let mut gv_acc = 0.0f32;
                    for dx in -r..=r {
                        for dy in -r..=r {
                            let t = taps(cu + dx as f32, cv + dy as f32, h, l);
                            let b00 = base + t.k0 * l + t.l0;
                            let b01 = b00 + usize::from(l >= 2);
                            let b10 = b00 + if h >= 2 { l } else { 0 };
                            let b11 = b10 + usize::from(l >= 2);
                            let c = ((dx + r) as usize) * side + (dy + r) as usize;
                            let gval = g[p * chans + c];
                            gu += gval
                                * t.active_u
                                * ((1.0 - t.dv) * (wv[b10] - wv[b00]) + t.dv * (wv[b11] - wv[b01]));
                            gv_acc += gval
                                * t.active_v
                                * ((1.0 - t.du) * (wv[b01] - wv[b00]) + t.du * (wv[b11] - wv[b10]));
                        }
                    }
                    dm[p * 2] += gu / cell_size[0];
                    dm[p * 2 + 1] += gv_acc / cell_size[1];
                }
            }
        }
    })
}

fn conv_block(tape: &mut Tape, x: Var, params: &Params, name: &str, pad: usize) -> Result<Var> {
    let w = params.var(&format!("{name}.weight"))?;
    let b = params.var(&format!("{name}.bias"))?;
    let c = tape.conv2d(x, w, Some(b), 1, pad)?;
    Ok(tape.relu(c)?)
}

/// One refinement iteration: look up correlation at the current motion,
/// encode lookup and motion, mix them, concatenate the raw motion back in,
/// and add the decoded update to the motion map.
pub fn refine_step(
    tape: &mut Tape,
    m: Var,
    w: Var,
    params: &Params,
    cfg: &IrmConfig,
    cell_size: [f32; 2],
) -> Result<Var> {
    let fc = corr_lookup(tape, w, m, cfg.radius, cell_size)?;
    let a = conv_block(tape, fc, params, "irm.corr", 0)?;
    let b = conv_block(tape, m, params, "irm.motion", 1)?;
    let ab = tape.concat_last(&[a, b])?;
    let mixed = conv_block(tape, ab, params, "irm.mix", 1)?;
    let r = tape.concat_last(&[mixed, m])?;
    let u = conv_block(tape, r, params, "irm.update1", 1)?;
    let w2 = params.var("irm.update2.weight")?;
    let b2 = params.var("irm.update2.bias")?;
    let dm = tape.conv2d(u, w2, Some(b2), 1, 1)?;
    Ok(tape.add(m, dm)?)
}

/// Applies `refine_step` `cfg.iterations` times with shared weights,
/// returning the final map plus a forward snapshot after every iteration.
pub fn refine(
    tape: &mut Tape,
    m0: Var,
    w: Var,
    params: &Params,
    cfg: &IrmConfig,
    cell_size: [f32; 2],
) -> Result<(Var, Vec<Tensor>)> {
    let mut m = m0;
    let mut snapshots = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        m = refine_step(tape, m, w, params, cfg, cell_size)?;
        snapshots.push(tape.value(m).clone());
    }
    Ok((m, snapshots))
}

/// Decodes per-cell vertical position and heading from the search features.
/// Heading is regressed as a (sin, cos) pair and converted through atan2,
/// so the loss never sees the ±π wrap.
pub fn regress_heads(tape: &mut Tape, fs_hat: Var, params: &Params) -> Result<RegressionMaps> {
    let z_h = conv_block(tape, fs_hat, params, "heads.z1", 1)?;
    let zw = params.var("heads.z2.weight")?;
    let zb = params.var("heads.z2.bias")?;
    let z_map = tape.conv2d(z_h, zw, Some(zb), 1, 1)?;

    let y_h = conv_block(tape, fs_hat, params, "heads.yaw1", 1)?;
    let yw = params.var("heads.yaw2.weight")?;
    let yb = params.var("heads.yaw2.bias")?;
    let sin_cos = tape.conv2d(y_h, yw, Some(yb), 1, 1)?;
    let sin = tape.narrow_last(sin_cos, 0, 1)?;
    let cos = tape.narrow_last(sin_cos, 1, 1)?;
    let theta_map = tape.atan2(sin, cos)?;
    Ok(RegressionMaps { z_map, theta_map })
}

/// Decoded track state plus whether the displaced cell had to be clamped
/// back onto the grid.
pub struct DecodedState {
    pub boxed: OrientedBox3D,
    pub clamped: bool,
    /// Planar motion read at the grid center, meters in the template frame.
    pub delta: [f64; 2],
}

fn bilinear_at(map: &Tensor, u: f64, v: f64, ch: usize) -> f64 {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let t = taps(u as f32, v as f32, h, w);
    let d = map.data();
    let at = |k: usize, l_: usize| d[(k * w + l_) * c + ch] as f64;
    let (k1, l1) = ((t.k0 + 1).min(h - 1), (t.l0 + 1).min(w - 1));
    let (du, dv) = (t.du as f64, t.dv as f64);
    (1.0 - du) * (1.0 - dv) * at(t.k0, t.l0)
        + (1.0 - du) * dv * at(t.k0, l1)
        + du * (1.0 - dv) * at(k1, t.l0)
        + du * dv * at(k1, l1)
}

/// Turns the refined motion map and regression maps into the next world
/// box: planar motion is read bilinearly at the grid center (the template
/// target sits there by construction), z and heading are indexed at the
/// motion-displaced cell, and the box size carries over.
pub fn read_state(
    motion: &Tensor,
    z_map: &Tensor,
    theta_map: &Tensor,
    prev: &OrientedBox3D,
    region: &RegionConfig,
) -> Result<DecodedState> {
    let (h, l) = region.bev_extents()?;
    if motion.shape() != [h, l, 2] {
        bail!("motion map shape {:?} does not match the {h}x{l} grid", motion.shape());
    }
    let (uc, vc) = ((h as f64 - 1.0) / 2.0, (l as f64 - 1.0) / 2.0);
    let dx = bilinear_at(motion, uc, vc, 0);
    let dy = bilinear_at(motion, uc, vc, 1);

    let (csx, csy) = (region.cell_size_x(), region.cell_size_y());
    let gi = (dx - region.x_min) / csx;
    let gj = (dy - region.y_min) / csy;
    let mut clamped = false;
    let mut clamp_idx = |g: f64, extent: usize| -> usize {
        if g < 0.0 {
            clamped = true;
            0
        } else if g as usize >= extent {
            clamped = true;
            extent - 1
        } else {
            g as usize
        }
    };
    let ci = clamp_idx(gi, h);
    let cj = clamp_idx(gj, l);
    let z_track = z_map.data()[(ci * l + cj) * 1] as f64;
    let theta = theta_map.data()[(ci * l + cj) * 1] as f64;

    let center = track_to_world_point([dx, dy, z_track], prev);
    let boxed = OrientedBox3D::new(center, prev.size, wrap_angle(prev.yaw + theta))?;
    Ok(DecodedState { boxed, clamped, delta: [dx, dy] })
}

/// Occupied-cell count of a footprint mask (values above ½).
pub fn count_occupied(occupancy: &Tensor) -> usize {
    occupancy.data().iter().filter(|v| **v > 0.5).count()
}

/// Training losses: mean squared keypoint-offset error, plus motion-map and
/// regression L1 terms averaged over the occupied footprint cells. Masked
/// terms are skipped (with a warning) when the footprint is empty.
#[allow(clippy::too_many_arguments)]
pub fn losses(
    tape: &mut Tape,
    pred_offsets: Var,
    gt_offsets: &Tensor,
    m_final: Var,
    gt_motion: &Tensor,
    maps: &RegressionMaps,
    gt_z: &Tensor,
    gt_theta: &Tensor,
    occupancy: &Tensor,
) -> Result<Losses> {
    let kp = {
        let gt = tape.constant(gt_offsets.clone());
        let diff = tape.sub(pred_offsets, gt)?;
        let sq = tape.mul(diff, diff)?;
        tape.mean_all(sq)?
    };

    let n_pos = count_occupied(occupancy);
    let (mt, reg) = if n_pos == 0 {
        log::warn!("target footprint occupies no grid cell; skipping masked loss terms");
        (None, None)
    } else {
        let inv = 1.0 / n_pos as f32;
        let occ = tape.constant(occupancy.clone());
        let occ2 = tape.concat_last(&[occ, occ])?;

        let gt_m = tape.constant(gt_motion.clone());
        let m_diff = tape.sub(m_final, gt_m)?;
        let m_abs = tape.abs(m_diff)?;
        let m_masked = tape.mul(m_abs, occ2)?;
        let m_sum = tape.sum_all(m_masked)?;
        let mt = tape.scale(m_sum, inv)?;

        let gt_zt = tape.constant(gt_z.clone());
        let z_diff = tape.sub(maps.z_map, gt_zt)?;
        let z_abs = tape.abs(z_diff)?;
        let z_masked = tape.mul(z_abs, occ)?;
        let z_sum = tape.sum_all(z_masked)?;

        let gt_th = tape.constant(gt_theta.clone());
        let t_diff = tape.sub(maps.theta_map, gt_th)?;
        let t_wrapped = tape.wrap_angle(t_diff)?;
        let t_abs = tape.abs(t_wrapped)?;
        let t_masked = tape.mul(t_abs, occ)?;
        let t_sum = tape.sum_all(t_masked)?;

        let zt = tape.add(z_sum, t_sum)?;
        let reg = tape.scale(zt, inv)?;
        (Some(mt), Some(reg))
    };

    let mut total = kp;
    if let Some(v) = mt {
        total = tape.add(total, v)?;
    }
    if let Some(v) = reg {
        total = tape.add(total, v)?;
    }
    Ok(Losses { kp, mt, reg, total, n_pos })
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
    use std::f64::consts::PI;

    fn tiny_cfg() -> IrmConfig {
        IrmConfig { iterations: 3, radius: 1, hidden: 4, scale_corr: true }
    }

    fn store_for(cfg: &IrmConfig, channels: usize, seed: u64) -> WeightStore {
        let mut store = WeightStore::new();
        materialize(&param_specs(cfg, channels), &mut ChaCha8Rng::seed_from_u64(seed), &mut store);
        store
    }

    fn random_map(shape: &[usize], seed: u64, scale: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn region_8x8() -> RegionConfig {
        RegionConfig {
            x_min: -1.6,
            x_max: 1.6,
            y_min: -1.6,
            y_max: 1.6,
            z_min: -1.0,
            z_max: 1.0,
            voxel_x: 0.4,
            voxel_y: 0.4,
            voxel_z: 0.5,
            bev_stride: 1,
        }
    }

    #[test]
    fn init_motion_fills_a_constant_field() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[1, 2]));
        let m = init_motion(&mut tape, zero, 4, 5).unwrap();
        assert!(tape.value(m).data().iter().all(|v| *v == 0.0));

        let v = tape.constant(Tensor::new(&[1, 2], vec![0.5, -0.25]).unwrap());
        let m = init_motion(&mut tape, v, 4, 5).unwrap();
        let data = tape.value(m).data();
        for cell in data.chunks(2) {
            assert_eq!(cell, &[0.5, -0.25]);
        }
        for ch in 0..2 {
            let vals: Vec<f32> = data.iter().skip(ch).step_by(2).copied().collect();
            let min = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(min, max);
        }
    }

    #[test]
    fn corr_of_identical_features_is_symmetric_with_norm_diagonal() {
        let f = random_map(&[3, 4, 5], 7, 1.0);
        let mut tape = Tape::new();
        let fx = tape.constant(f.clone());
        let w = build_corr(&mut tape, fx, fx, true).unwrap();
        let wt = tape.value(w);
        assert_eq!(wt.shape(), &[3, 4, 3, 4]);
        let p = 12;
        let flat = wt.data();
        let scale = 1.0 / (5.0f32).sqrt();
        for a in 0..p {
            for b in 0..p {
                let ab = flat[a * p + b];
                let ba = flat[b * p + a];
                assert!((ab - ba).abs() < 1e-5);
            }
            let norm: f32 = f.data()[a * 5..(a + 1) * 5].iter().map(|v| v * v).sum();
            assert!((flat[a * p + a] - norm * scale).abs() < 1e-5);
        }
    }

    #[test]
    fn corr_of_one_hot_channels_vanishes_off_matches() {
        // Each cell's feature is a one-hot channel; dot products are zero
        // unless the two cells picked the same channel.
        let (h, l, d) = (2, 3, 4);
        let pick = |p: usize| p % d;
        let f = Tensor::from_fn(&[h, l, d], |idx| {
            let (p, ch) = (idx / d, idx % d);
            if ch == pick(p) { 1.0 } else { 0.0 }
        });
        let mut tape = Tape::new();
        let fx = tape.constant(f);
        let w = build_corr(&mut tape, fx, fx, false).unwrap();
        let flat = tape.value(w).data();
        let p = h * l;
        for a in 0..p {
            for b in 0..p {
                let want = if pick(a) == pick(b) { 1.0 } else { 0.0 };
                assert_eq!(flat[a * p + b], want);
            }
        }
    }

    #[test]
    fn corr_matches_brute_force_on_random_maps() {
        let fx = random_map(&[8, 8, 16], 11, 1.0);
        let fs = random_map(&[8, 8, 16], 12, 1.0);
        let mut tape = Tape::new();
        let vx = tape.constant(fx.clone());
        let vs = tape.constant(fs.clone());
        let w = build_corr(&mut tape, vx, vs, true).unwrap();
        let got = tape.value(w).data();
        let d = 16;
        let p = 64;
        let scale = 1.0 / (d as f64).sqrt();
        for a in 0..p {
            for b in 0..p {
                let mut dot = 0.0f64;
                for ch in 0..d {
                    dot += fx.data()[a * d + ch] as f64 * fs.data()[b * d + ch] as f64;
                }
                let want = dot * scale;
                assert!(
                    (got[a * p + b] as f64 - want).abs() < 1e-4,
                    "W[{a},{b}] = {} vs {want}",
                    got[a * p + b]
                );
            }
        }
    }

    /// Volume whose entries encode their own indices, so window samples can
    /// be predicted exactly: W[p, (k, l)] = 100·p + 10·k + l.
    fn indexed_volume(h: usize, l: usize) -> Tensor {
        Tensor::from_fn(&[h, l, h, l], |idx| {
            let q = idx % (h * l);
            let p = idx / (h * l);
            (100 * p + 10 * (q / l) + q % l) as f32
        })
    }

    #[test]
    fn zero_motion_lookup_reads_the_centered_window() {
        let (h, l) = (5, 5);
        let w_t = indexed_volume(h, l);
        let mut tape = Tape::new();
        let w = tape.constant(w_t);
        let m = tape.constant(Tensor::zeros(&[h, l, 2]));
        let out = corr_lookup(&mut tape, w, m, 1, [1.0, 1.0]).unwrap();
        let ot = tape.value(out);
        assert_eq!(ot.shape(), &[h, l, 9]);
        // Interior cell (2, 3): window centers on itself.
        let p = 2 * l + 3;
        for (c, (dx, dy)) in [(-1i32, -1i32), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
            .iter()
            .enumerate()
            .map(|(c, d)| (c, *d))
        {
            let want = (100 * p as i32 + 10 * (2 + dx) + (3 + dy)) as f32;
            assert_eq!(ot.data()[p * 9 + c], want);
        }
        // Border cell (0, 0): out-of-range taps clamp to the edge value.
        assert_eq!(ot.data()[0], 0.0); // (-1,-1) clamps to (0,0) => value 0
        assert_eq!(ot.data()[4], 0.0); // center
        assert_eq!(ot.data()[8], 11.0); // (1,1)
    }

    #[test]
    fn integer_motion_shifts_the_window_exactly() {
        let (h, l) = (6, 6);
        let w_t = indexed_volume(h, l);
        let mut tape = Tape::new();
        let w = tape.constant(w_t);
        let zero = tape.constant(Tensor::zeros(&[h, l, 2]));
        let base = corr_lookup(&mut tape, w, zero, 1, [0.5, 0.5]).unwrap();
        // 1 cell along x = 0.5 m at this cell size.
        let shifted_m = tape.constant(Tensor::from_fn(&[h, l, 2], |i| if i % 2 == 0 { 0.5 } else { 0.0 }));
        let shifted = corr_lookup(&mut tape, w, shifted_m, 1, [0.5, 0.5]).unwrap();
        let b = tape.value(base).data();
        let s = tape.value(shifted).data();
        // Interior: shifted window row (dx=-1) equals base row (dx=0).
        for p in [7usize, 14, 21] {
            for dy in 0..3 {
                assert_eq!(s[p * 9 + dy], b[p * 9 + 3 + dy]);
                assert_eq!(s[p * 9 + 3 + dy], b[p * 9 + 6 + dy]);
            }
        }
    }

    #[test]
    fn fractional_motion_averages_adjacent_windows() {
        let (h, l) = (5, 4);
        let w_t = indexed_volume(h, l);
        let mut tape = Tape::new();
        let w = tape.constant(w_t);
        let zero = tape.constant(Tensor::zeros(&[h, l, 2]));
        let base = corr_lookup(&mut tape, w, zero, 1, [1.0, 1.0]).unwrap();
        let half = tape.constant(Tensor::from_fn(&[h, l, 2], |i| if i % 2 == 1 { 0.5 } else { 0.0 }));
        let mid = corr_lookup(&mut tape, w, half, 1, [1.0, 1.0]).unwrap();
        let b = tape.value(base).data();
        let g = tape.value(mid).data();
        // Interior cell (2,1): half-cell column motion averages each window
        // value with its right neighbor.
        let p = 2 * l + 1;
        for c in [0usize, 1, 3, 4, 6, 7] {
            let want = 0.5 * (b[p * 9 + c] + b[p * 9 + c + 1]);
            assert!((g[p * 9 + c] - want).abs() < 1e-5, "channel {c}");
        }
    }

    #[test]
    fn lookup_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (h, l, radius) in [(4usize, 4usize, 1usize), (5, 3, 2), (3, 5, 1)] {
            let w = random_map(&[h, l, h, l], rng.gen(), 1.0);
            // Non-integer displaced positions away from cell boundaries and
            // the grid edge, so the interpolation stays differentiable.
            let m = Tensor::from_fn(&[h, l, 2], |_| rng.gen_range(-0.4..0.4) + 0.45 * rng.gen_range(0..2) as f32);
            let report = grad_check(
                "corr_lookup",
                &[w, m],
                DEFAULT_REL_TOL,
                DEFAULT_ABS_TOL,
                move |t, v| corr_lookup(t, v[0], v[1], radius, [0.8, 1.2]).and_then(|o| t.sum_all(o)),
            );
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn zeroed_update_head_makes_refine_identity() {
        let cfg = IrmConfig { iterations: 7, radius: 1, hidden: 4, scale_corr: true };
        let mut store = store_for(&cfg, 3, 41);
        store.insert("irm.update2.weight", Tensor::zeros(&[3, 3, 4, 2]));
        store.insert("irm.update2.bias", Tensor::zeros(&[2]));
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let m0_t = random_map(&[6, 6, 2], 42, 0.5);
        let m0 = tape.constant(m0_t.clone());
        let fx = tape.constant(random_map(&[6, 6, 3], 43, 1.0));
        let w = build_corr(&mut tape, fx, fx, true).unwrap();
        let (m_n, snaps) = refine(&mut tape, m0, w, &params, &cfg, [1.0, 1.0]).unwrap();
        assert_eq!(snaps.len(), 7);
        assert_eq!(tape.value(m_n).data(), m0_t.data());
    }

    #[test]
    fn refine_with_one_iteration_equals_refine_step() {
        let cfg = IrmConfig { iterations: 1, radius: 1, hidden: 4, scale_corr: true };
        let store = store_for(&cfg, 3, 51);
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let m0 = tape.constant(random_map(&[5, 5, 2], 52, 0.3));
        let fx = tape.constant(random_map(&[5, 5, 3], 53, 1.0));
        let fs = tape.constant(random_map(&[5, 5, 3], 54, 1.0));
        let w = build_corr(&mut tape, fx, fs, true).unwrap();
        let (m_n, _) = refine(&mut tape, m0, w, &params, &cfg, [0.5, 0.5]).unwrap();
        let single = refine_step(&mut tape, m0, w, &params, &cfg, [0.5, 0.5]).unwrap();
        assert_eq!(tape.value(m_n).data(), tape.value(single).data());
    }

    /// Overwrites the refinement convolutions with small weights and
    /// positive biases so every pre-activation stays strictly positive under
    /// finite-difference probing — the check then runs at a point where the
    /// whole block is smooth (worst-case |Σ w·x| per layer is bounded well
    /// below the bias).
    fn smooth_refine_store(store: &mut WeightStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |name: &str, scale: f32| {
            let shape = store.get(name).unwrap().shape().to_vec();
            let t = Tensor::from_fn(&shape, |_| rng.gen_range(-scale..scale));
            store.insert(name, t);
        };
        fill("irm.corr.weight", 0.02);
        fill("irm.motion.weight", 0.01);
        fill("irm.mix.weight", 0.005);
        fill("irm.update1.weight", 0.005);
        fill("irm.update2.weight", 0.3);
        for (name, bias) in [
            ("irm.corr.bias", 0.25),
            ("irm.motion.bias", 0.25),
            ("irm.mix.bias", 0.25),
            ("irm.update1.bias", 0.3),
        ] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.insert(name, Tensor::full(&shape, bias));
        }
        store.insert("irm.update2.bias", Tensor::from_fn(&[2], |_| rng.gen_range(-0.1..0.1)));
    }

    #[test]
    fn refine_step_gradients_match_finite_differences() {
        let cfg = IrmConfig { iterations: 1, radius: 1, hidden: 3, scale_corr: true };
        let mut store = store_for(&cfg, 2, 61);
        smooth_refine_store(&mut store, 65);
        let names: Vec<String> = store.names().cloned().collect();
        // Only the refinement block's own parameters take part.
        let irm_names: Vec<String> = names.iter().filter(|n| n.starts_with("irm.")).cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        // Motion entries keep their displaced positions a safe margin away
        // from the interpolation lattice and the grid border.
        let mut inputs = vec![
            Tensor::from_fn(&[8, 8, 2], |_| rng.gen_range(0.15..0.65)),
            random_map(&[8, 8, 8, 8], 63, 0.5),
        ];
        inputs.extend(irm_names.iter().map(|n| store.get(n).unwrap().clone()));
        let cfg2 = cfg.clone();
        let irm_names2 = irm_names.clone();
        let report = grad_check_with_step(
            "refine_step",
            &inputs,
            DEFAULT_REL_TOL,
            COMPOSITE_ABS_TOL,
            COMPOSITE_STEP,
            move |t, v| -> Result<Var> {
                let params = Params::from_pairs(irm_names2.iter().cloned().zip(v[2..].iter().copied()));
                let m1 = refine_step(t, v[0], v[1], &params, &cfg2, [1.0, 1.0])?;
                let mut rng = ChaCha8Rng::seed_from_u64(64);
                let sign = t.constant(Tensor::from_fn(&[8, 8, 2], |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }));
                let s = t.mul(m1, sign)?;
                Ok(t.sum_all(s)?)
            },
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn heads_decode_shapes_and_zero_heading_bias() {
        let cfg = tiny_cfg();
        let mut store = store_for(&cfg, 3, 71);
        // Zeroed final yaw conv leaves only the (0, 1) bias: heading 0.
        store.insert("heads.yaw2.weight", Tensor::zeros(&[3, 3, 4, 2]));
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let fs = tape.constant(random_map(&[6, 5, 3], 72, 1.0));
        let maps = regress_heads(&mut tape, fs, &params).unwrap();
        assert_eq!(tape.value(maps.z_map).shape(), &[6, 5, 1]);
        assert_eq!(tape.value(maps.theta_map).shape(), &[6, 5, 1]);
        assert!(tape.value(maps.theta_map).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoded_heading_stays_in_principal_range() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 3, 81);
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let fs = tape.constant(random_map(&[7, 7, 3], 82, 3.0));
        let maps = regress_heads(&mut tape, fs, &params).unwrap();
        for v in tape.value(maps.theta_map).data() {
            assert!(*v > -PI as f32 - 1e-6 && *v <= PI as f32 + 1e-6);
        }
    }

    #[test]
    fn heads_gradients_match_finite_differences() {
        for (h, w, d, seed) in [(5usize, 5usize, 2usize, 91u64), (4, 6, 3, 92), (6, 4, 2, 93)] {
            let cfg = IrmConfig { iterations: 1, radius: 1, hidden: 3, scale_corr: true };
            let mut store = store_for(&cfg, d, seed);
            // Keep the hidden pre-activations strictly positive (smooth
            // through the rectifier) and the (sin, cos) pair bounded away
            // from the atan2 origin under probing.
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
            for stem in ["z1", "yaw1"] {
                let wname = format!("heads.{stem}.weight");
                let shape = store.get(&wname).unwrap().shape().to_vec();
                store.insert(wname, Tensor::from_fn(&shape, |_| rng.gen_range(-0.006..0.006)));
                store.insert(format!("heads.{stem}.bias"), Tensor::full(&[cfg.hidden], 0.3));
            }
            let yw_shape = store.get("heads.yaw2.weight").unwrap().shape().to_vec();
            store.insert("heads.yaw2.weight", Tensor::from_fn(&yw_shape, |_| rng.gen_range(-0.05..0.05)));
            let zw_shape = store.get("heads.z2.weight").unwrap().shape().to_vec();
            store.insert("heads.z2.weight", Tensor::from_fn(&zw_shape, |_| rng.gen_range(-0.3..0.3)));
            let head_names: Vec<String> =
                store.names().filter(|n| n.starts_with("heads.")).cloned().collect();
            let mut inputs = vec![random_map(&[h, w, d], seed + 5, 1.0)];
            inputs.extend(head_names.iter().map(|n| store.get(n).unwrap().clone()));
            let names2 = head_names.clone();
            let report = grad_check_with_step(
                "regress_heads",
                &inputs,
                DEFAULT_REL_TOL,
                COMPOSITE_ABS_TOL,
                COMPOSITE_STEP,
                move |t, v| -> Result<Var> {
                    let params = Params::from_pairs(names2.iter().cloned().zip(v[1..].iter().copied()));
                    let maps = regress_heads(t, v[0], &params)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 6);
                    let shape = t.value(maps.z_map).shape().to_vec();
                    let s1 = t.constant(Tensor::from_fn(&shape, |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }));
                    let s2 = t.constant(Tensor::from_fn(&shape, |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }));
                    let a = t.mul(maps.z_map, s1)?;
                    let b = t.mul(maps.theta_map, s2)?;
                    let sa = t.sum_all(a)?;
                    let sb = t.sum_all(b)?;
                    Ok(t.add(sa, sb)?)
                },
            );
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn read_state_recovers_known_displacement() {
        let region = region_8x8();
        let (h, l) = region.bev_extents().unwrap();
        let prev = OrientedBox3D::new([10.0, -4.0, 1.0], [1.0, 0.8, 0.5], 0.3).unwrap();
        // Oracle maps: every cell reports the same known track-frame state.
        let (dx, dy, dz, dth) = (0.8, -0.4, 0.15, 0.2);
        let motion = Tensor::from_fn(&[h, l, 2], |i| if i % 2 == 0 { dx as f32 } else { dy as f32 });
        let z_map = Tensor::full(&[h, l, 1], dz as f32);
        let theta_map = Tensor::full(&[h, l, 1], dth as f32);
        let out = read_state(&motion, &z_map, &theta_map, &prev, &region).unwrap();
        assert!(!out.clamped);
        let want_center = track_to_world_point([dx, dy, dz], &prev);
        for k in 0..3 {
            assert!((out.boxed.center[k] - want_center[k]).abs() < 0.4, "axis {k}");
        }
        assert!((out.boxed.yaw - wrap_angle(prev.yaw + dth)).abs() < 1e-6);
        assert_eq!(out.boxed.size, prev.size);
        assert!((out.delta[0] - dx).abs() < 1e-6 && (out.delta[1] - dy).abs() < 1e-6);
    }

    #[test]
    fn read_state_zero_motion_keeps_prev_box() {
        let region = region_8x8();
        let (h, l) = region.bev_extents().unwrap();
        let prev = OrientedBox3D::new([3.0, 2.0, -0.5], [1.0, 1.0, 1.0], -0.7).unwrap();
        let motion = Tensor::zeros(&[h, l, 2]);
        let z_map = Tensor::zeros(&[h, l, 1]);
        let theta_map = Tensor::zeros(&[h, l, 1]);
        let out = read_state(&motion, &z_map, &theta_map, &prev, &region).unwrap();
        for k in 0..3 {
            assert!((out.boxed.center[k] - prev.center[k]).abs() < 1e-9);
        }
        assert_eq!(out.boxed.yaw, prev.yaw);
    }

    #[test]
    fn read_state_flags_out_of_grid_displacement() {
        let region = region_8x8();
        let (h, l) = region.bev_extents().unwrap();
        let prev = OrientedBox3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let motion = Tensor::from_fn(&[h, l, 2], |i| if i % 2 == 0 { 50.0 } else { 0.0 });
        let z_map = Tensor::zeros(&[h, l, 1]);
        let theta_map = Tensor::zeros(&[h, l, 1]);
        let out = read_state(&motion, &z_map, &theta_map, &prev, &region).unwrap();
        assert!(out.clamped);
    }

    fn loss_fixture(
        pred_kp: Tensor,
        gt_kp: Tensor,
        m: Tensor,
        gt_m: Tensor,
        z: Tensor,
        gt_z: Tensor,
        th: Tensor,
        gt_th: Tensor,
        occ: Tensor,
    ) -> (f32, Option<f32>, Option<f32>, f32) {
        let mut tape = Tape::new();
        let pred = tape.constant(pred_kp);
        let mv = tape.constant(m);
        let zv = tape.constant(z);
        let tv = tape.constant(th);
        let maps = RegressionMaps { z_map: zv, theta_map: tv };
        let out = losses(&mut tape, pred, &gt_kp, mv, &gt_m, &maps, &gt_z, &gt_th, &occ).unwrap();
        (
            tape.value(out.kp).item(),
            out.mt.map(|v| tape.value(v).item()),
            out.reg.map(|v| tape.value(v).item()),
            tape.value(out.total).item(),
        )
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let kp = random_map(&[1, 27], 7, 1.0);
        let m = random_map(&[4, 4, 2], 8, 1.0);
        let z = random_map(&[4, 4, 1], 9, 1.0);
        let th = random_map(&[4, 4, 1], 10, 1.0);
        let occ = Tensor::full(&[4, 4, 1], 1.0);
        let (l_kp, l_mt, l_reg, total) =
            loss_fixture(kp.clone(), kp, m.clone(), m, z.clone(), z, th.clone(), th, occ);
        assert_eq!(l_kp, 0.0);
        assert_eq!(l_mt, Some(0.0));
        assert_eq!(l_reg, Some(0.0));
        assert_eq!(total, 0.0);
    }

    #[test]
    fn single_occupied_cell_gives_plain_error() {
        let kp = Tensor::zeros(&[1, 27]);
        let mut m = Tensor::zeros(&[4, 4, 2]);
        m.data_mut()[(2 * 4 + 1) * 2] = 0.3; // x error at occupied cell (2,1)
        let gt_m = Tensor::zeros(&[4, 4, 2]);
        let occ = Tensor::from_fn(&[4, 4, 1], |i| if i == 2 * 4 + 1 { 1.0 } else { 0.0 });
        let z = Tensor::zeros(&[4, 4, 1]);
        let th = Tensor::zeros(&[4, 4, 1]);
        let (_, l_mt, l_reg, _) =
            loss_fixture(kp.clone(), kp, m, gt_m, z.clone(), z.clone(), th.clone(), th, occ);
        assert!((l_mt.unwrap() - 0.3).abs() < 1e-7);
        assert_eq!(l_reg, Some(0.0));
    }

    #[test]
    fn unoccupied_cells_do_not_move_masked_losses() {
        let kp = Tensor::zeros(&[1, 27]);
        let occ = Tensor::from_fn(&[3, 3, 1], |i| if i == 4 { 1.0 } else { 0.0 });
        let gt_m = Tensor::zeros(&[3, 3, 2]);
        let z = Tensor::zeros(&[3, 3, 1]);
        let th = Tensor::zeros(&[3, 3, 1]);
        let errs = |outside: f32| {
            let m = Tensor::from_fn(&[3, 3, 2], |i| if i / 2 == 4 { 0.2 } else { outside });
            loss_fixture(kp.clone(), kp.clone(), m, gt_m.clone(), z.clone(), z.clone(), th.clone(), th.clone(), occ.clone())
        };
        let (_, a, _, _) = errs(1.0);
        let (_, b, _, _) = errs(2.0);
        assert_eq!(a, b);
        assert!((a.unwrap() - 0.4).abs() < 1e-7); // both channels summed
    }

    #[test]
    fn empty_footprint_skips_masked_terms() {
        let kp = Tensor::full(&[1, 27], 0.5);
        let gt_kp = Tensor::zeros(&[1, 27]);
        let m = random_map(&[3, 3, 2], 11, 1.0);
        let z = Tensor::zeros(&[3, 3, 1]);
        let th = Tensor::zeros(&[3, 3, 1]);
        let occ = Tensor::zeros(&[3, 3, 1]);
        let (l_kp, l_mt, l_reg, total) =
            loss_fixture(kp, gt_kp, m.clone(), Tensor::zeros(&[3, 3, 2]), z.clone(), z.clone(), th.clone(), th, occ);
        assert!(l_mt.is_none() && l_reg.is_none());
        assert!((l_kp - 0.25).abs() < 1e-6);
        assert_eq!(total, l_kp);
    }

    #[test]
    fn heading_loss_wraps_across_the_seam() {
        let kp = Tensor::zeros(&[1, 27]);
        let m = Tensor::zeros(&[2, 2, 2]);
        let z = Tensor::zeros(&[2, 2, 1]);
        let occ = Tensor::full(&[2, 2, 1], 1.0);
        let th = Tensor::full(&[2, 2, 1], PI as f32 - 0.1);
        let gt_th = Tensor::full(&[2, 2, 1], -PI as f32 + 0.1);
        let (_, _, l_reg, _) =
            loss_fixture(kp.clone(), kp, m.clone(), m, z.clone(), z.clone(), th, gt_th, occ);
        // Seam-adjacent headings differ by 0.2 rad, not nearly 2π.
        assert!((l_reg.unwrap() - 0.2).abs() < 1e-5);
    }

    #[test]
    fn losses_flow_gradients_into_motion_and_heads() {
        let mut tape = Tape::new();
        let pred = tape.param(random_map(&[1, 27], 21, 0.5));
        let m = tape.param(random_map(&[3, 3, 2], 22, 0.5));
        let z = tape.param(random_map(&[3, 3, 1], 23, 0.5));
        let th = tape.param(random_map(&[3, 3, 1], 24, 0.5));
        let maps = RegressionMaps { z_map: z, theta_map: th };
        let occ = Tensor::full(&[3, 3, 1], 1.0);
        let out = losses(
            &mut tape,
            pred,
            &Tensor::zeros(&[1, 27]),
            m,
            &Tensor::full(&[3, 3, 2], 0.7),
            &maps,
            &Tensor::full(&[3, 3, 1], 0.3),
            &Tensor::full(&[3, 3, 1], -0.2),
            &occ,
        )
        .unwrap();
        tape.backward(out.total).unwrap();
        for v in [pred, m, z, th] {
            let g = tape.grad(v).unwrap();
            assert!(g.data().iter().any(|x| *x != 0.0));
        }
    }
}

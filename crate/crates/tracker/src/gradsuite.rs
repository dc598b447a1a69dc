//! One callable battery of finite-difference gradient checks: every
//! differentiable tensor operation and each composite block of the tracker,
//! each at several small shapes. The CLI turns any failure into a non-zero
//! exit; the test suite asserts on the same reports.

use crate::config::{BmpConfig, IrmConfig, RimConfig};
use crate::geometry::KEYPOINT_DIM;
use crate::params::{materialize, Params};
use crate::{bmp, irm, rim};
use mtm_tensor::gradcheck::{
    grad_check, grad_check_with_step, GradCheckReport, COMPOSITE_ABS_TOL, COMPOSITE_STEP,
    DEFAULT_ABS_TOL, DEFAULT_REL_TOL,
};
use mtm_tensor::{PoolKind, Tape, Tensor, Var, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values pushed away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f32 = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Random-sign reduction: keeps per-element gradients at O(1) while the
/// loss magnitude (and with it the finite-difference round-off) grows only
/// like √n instead of n.
fn signed_sum(t: &mut Tape, x: Var, seed: u64) -> mtm_tensor::Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let mut r = rng(seed);
    let w = t.constant(Tensor::from_fn(&shape, |_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }));
    let p = t.mul(x, w)?;
    t.sum_all(p)
}

/// Sum weighted by fixed random coefficients; keeps reductions
/// non-degenerate (a plain sum of softmax rows has zero gradient).
fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> mtm_tensor::Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let mut r = rng(seed);
    let w = t.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = t.mul(x, w)?;
    t.sum_all(p)
}

fn check<F>(name: String, inputs: &[Tensor], build: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> mtm_tensor::Result<Var>,
{
    grad_check(&name, inputs, DEFAULT_REL_TOL, DEFAULT_ABS_TOL, build)
}

// ── Elementwise, broadcast and shape operations ─────────────────────────

fn elementwise_binary(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(21);
    for shape in [[3usize, 4], [2, 7], [5, 1]] {
        let a = uniform(&mut r, &shape, -1.5, 1.5);
        let b = uniform(&mut r, &shape, -1.5, 1.5);
        for op in ["add", "sub", "mul"] {
            out.push(check(format!("{op}[{shape:?}]"), &[a.clone(), b.clone()], move |t, v| {
                let y = match op {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                weighted_sum(t, y, 50)
            }));
        }
    }
}

fn unary(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(23);
    for shape in [[3usize, 3], [2, 5], [6, 1]] {
        // relu and abs kink at zero; wrap_angle inputs stay inside (-pi, pi).
        let x = away_from_zero(&mut r, &shape, 0.2);
        for op in ["relu", "sigmoid", "abs", "scale", "wrap_angle"] {
            out.push(check(format!("{op}[{shape:?}]"), &[x.clone()], move |t, v| {
                let y = match op {
                    "relu" => t.relu(v[0])?,
                    "sigmoid" => t.sigmoid(v[0])?,
                    "abs" => t.abs(v[0])?,
                    "scale" => t.scale(v[0], -2.5)?,
                    _ => t.wrap_angle(v[0])?,
                };
                weighted_sum(t, y, 70)
            }));
        }
    }
}

fn arctangent(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(22);
    for shape in [[2usize, 3], [4, 1], [1, 6]] {
        // Radius stays away from the origin singularity.
        let y = away_from_zero(&mut r, &shape, 0.3);
        let x = away_from_zero(&mut r, &shape, 0.3);
        out.push(check(format!("atan2[{shape:?}]"), &[y, x], |t, v| {
            let a = t.atan2(v[0], v[1])?;
            weighted_sum(t, a, 60)
        }));
    }
}

fn channel_broadcast(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(24);
    for (lead, c) in [((2usize, 3usize), 4usize), ((1, 5), 2), ((3, 2), 6)] {
        let a = uniform(&mut r, &[lead.0, lead.1, c], -1.0, 1.0);
        let b = uniform(&mut r, &[c], -1.0, 1.0);
        for op in ["add_channel", "mul_channel"] {
            out.push(check(format!("{op}[{lead:?}x{c}]"), &[a.clone(), b.clone()], move |t, v| {
                let y = if op == "add_channel" {
                    t.add_channel(v[0], v[1])?
                } else {
                    t.mul_channel(v[0], v[1])?
                };
                weighted_sum(t, y, 80)
            }));
        }
    }
}

fn matmul_and_transpose(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(25);
    for (m, k, n) in [(2usize, 3usize, 4usize), (1, 5, 2), (4, 2, 3)] {
        let a = uniform(&mut r, &[m, k], -1.0, 1.0);
        let b = uniform(&mut r, &[k, n], -1.0, 1.0);
        out.push(check(format!("matmul[{m}x{k}x{n}]"), &[a.clone(), b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 90)
        }));
        out.push(check(format!("transpose[{m}x{k}]"), &[a], |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 95)
        }));
    }
}

fn softmax(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(26);
    for (m, n) in [(2usize, 3usize), (3, 4), (1, 5)] {
        let x = uniform(&mut r, &[m, n], -2.0, 2.0);
        out.push(check(format!("softmax[{m}x{n}]"), &[x], |t, v| {
            let s = t.softmax(v[0], 1)?;
            weighted_sum(t, s, 100)
        }));
    }
    let x = uniform(&mut r, &[4, 3], -2.0, 2.0);
    out.push(check("softmax[axis0 4x3]".into(), &[x], |t, v| {
        let s = t.softmax(v[0], 0)?;
        weighted_sum(t, s, 123)
    }));
}

fn layer_norm(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(28);
    for (rows, c) in [(2usize, 4usize), (3, 3), (1, 6)] {
        let x = uniform(&mut r, &[rows, c], -2.0, 2.0);
        let gamma = uniform(&mut r, &[c], 0.5, 1.5);
        let beta = uniform(&mut r, &[c], -0.5, 0.5);
        out.push(check(format!("layer_norm[{rows}x{c}]"), &[x, gamma, beta], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 110)
        }));
    }
}

fn conv(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(29);
    for (h, w, cin, cout, k, stride, pad) in
        [(4usize, 4usize, 2usize, 3usize, 3usize, 1usize, 1usize), (5, 3, 1, 2, 3, 2, 1), (3, 3, 3, 1, 1, 1, 0)]
    {
        let x = uniform(&mut r, &[h, w, cin], -1.0, 1.0);
        let wt = uniform(&mut r, &[k, k, cin, cout], -0.6, 0.6);
        let b = uniform(&mut r, &[cout], -0.3, 0.3);
        out.push(check(format!("conv2d[{h}x{w}x{cin}->{cout} k{k}s{stride}p{pad}]"), &[x, wt, b], move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted_sum(t, y, 120)
        }));
    }
}

fn bilinear(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(30);
    for (h, w, c, p) in [(4usize, 4usize, 2usize, 5usize), (3, 5, 1, 4), (6, 2, 3, 3)] {
        let f = uniform(&mut r, &[h, w, c], -1.0, 1.0);
        // Interior, non-integer coords: away from clamp edges and the
        // derivative kinks at whole coordinates.
        let coords = Tensor::from_fn(&[p, 2], |j| {
            let extent = if j % 2 == 0 { h } else { w } as f32;
            0.3 + r.gen_range(0.1..0.8) * (extent - 1.6)
        });
        out.push(check(format!("bilinear_sample[{h}x{w}x{c}]"), &[f, coords], |t, v| {
            let y = t.bilinear_sample(v[0], v[1])?;
            weighted_sum(t, y, 130)
        }));
    }
}

/// Random map with one strictly dominant cell per channel, so a ±h probe
/// can never flip which cell a max pool routes its gradient through.
fn peaked_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut t = Tensor::from_fn(&[h, w, c], |_| r.gen_range(-0.5..0.5));
    let data = t.data_mut();
    for ch in 0..c {
        let cell = (ch % h) * w + (ch + 1) % w;
        data[cell * c + ch] = 2.0 + 0.25 * ch as f32;
    }
    t
}

fn pools(out: &mut Vec<GradCheckReport>) {
    for (i, (h, w, c)) in [(3usize, 3usize, 2usize), (2, 4, 1), (4, 2, 3)].into_iter().enumerate() {
        let x = peaked_map(h, w, c, 140 + i as u64);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let tag = match kind {
                PoolKind::Avg => "avg",
                PoolKind::Max => "max",
            };
            out.push(check(format!("global_pool_{tag}[{h}x{w}x{c}]"), &[x.clone()], move |t, v| {
                let y = t.global_pool(v[0], kind)?;
                weighted_sum(t, y, 140)
            }));
        }
    }
}

fn shape_ops(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(32);
    for (rows, c1, c2) in [(2usize, 3usize, 2usize), (3, 1, 4), (1, 5, 5)] {
        let a = uniform(&mut r, &[rows, c1], -1.0, 1.0);
        let b = uniform(&mut r, &[rows, c2], -1.0, 1.0);
        out.push(check(format!("concat_narrow[{rows}x{c1}|{c2}]"), &[a.clone(), b], move |t, v| {
            let cat = t.concat_last(&[v[0], v[1]])?;
            let cut = t.narrow_last(cat, 1, c1 + c2 - 1)?;
            weighted_sum(t, cut, 150)
        }));
        let total = rows * c1;
        out.push(check(format!("reshape[{rows}x{c1}]"), &[a], move |t, v| {
            let y = t.reshape(v[0], &[total])?;
            weighted_sum(t, y, 155)
        }));
    }
}

fn reductions(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(33);
    for shape in [[2usize, 3], [4, 2], [1, 5]] {
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        for op in ["sum_all", "mean_all", "mean_rows"] {
            out.push(check(format!("{op}[{shape:?}]"), &[x.clone()], move |t, v| match op {
                "sum_all" => t.sum_all(v[0]),
                "mean_all" => t.mean_all(v[0]),
                _ => {
                    let m = t.mean_rows(v[0])?;
                    weighted_sum(t, m, 160)
                }
            }));
        }
    }
}

// ── Custom sampling operations ──────────────────────────────────────────

fn deform(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(81);
    for (h, w, c, p, k) in [(5usize, 4usize, 3usize, 3usize, 2usize), (4, 6, 2, 4, 3), (3, 3, 4, 2, 1)] {
        let f = uniform(&mut r, &[h, w, c], -1.0, 1.0);
        // Interior points with fractional parts well away from the integer
        // lattice, where the interpolant has derivative kinks.
        let coords = Tensor::from_fn(&[p * k, 2], |i| {
            let extent = if i % 2 == 0 { h } else { w };
            r.gen_range(0..extent - 1) as f32 + r.gen_range(0.2..0.8)
        });
        let weights = uniform(&mut r, &[p, k], -1.0, 1.0);
        out.push(check(format!("deform_sample[{h}x{w}x{c} p{p}k{k}]"), &[f, coords, weights], |t, v| {
            let y = rim::deform_sample(t, v[0], v[1], v[2])?;
            t.sum_all(y)
        }));
    }
}

fn lookup(out: &mut Vec<GradCheckReport>) {
    let mut r = rng(31);
    for (h, l, radius) in [(4usize, 4usize, 1usize), (5, 3, 2), (3, 5, 1)] {
        let w = uniform(&mut r, &[h, l, h, l], -1.0, 1.0);
        // Non-integer displaced positions away from cell boundaries and the
        // grid edge, so the interpolation stays differentiable.
        let m = Tensor::from_fn(&[h, l, 2], |_| r.gen_range(-0.4..0.4) + 0.45 * r.gen_range(0..2) as f32);
        out.push(check(format!("corr_lookup[{h}x{l} r{radius}]"), &[w, m], move |t, v| {
            let y = irm::corr_lookup(t, v[0], v[1], radius, [0.8, 1.2])?;
            t.sum_all(y)
        }));
    }
}

// ── Composite blocks ────────────────────────────────────────────────────

fn store_inputs(store: &WeightStore, names: &[String]) -> Vec<Tensor> {
    names.iter().map(|n| store.get(n).expect("listed name").clone()).collect()
}

/// Transformer stack: offset embedding, one self-attention encoder layer,
/// one cross-attention decoder layer, regression head. The feed-forward
/// convolutions are rewritten with small weights under a positive bias so
/// every rectifier input stays strictly positive while probing.
fn bmp_block(out: &mut Vec<GradCheckReport>) {
    for (rows, d, heads, f, seed) in
        [(4usize, 8usize, 2usize, 12usize, 201u64), (3, 6, 1, 8, 202), (5, 4, 2, 6, 203)]
    {
        let cfg = BmpConfig {
            history_len: rows + 1,
            token_dim: d,
            heads,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: f,
        };
        let mut store = WeightStore::new();
        materialize(&bmp::param_specs(&cfg), &mut rng(seed), &mut store);
        let mut r = rng(seed + 1);
        for prefix in ["bmp.enc0", "bmp.dec0"] {
            store.insert(
                format!("{prefix}.ffn1.weight"),
                Tensor::from_fn(&[d, f], |_| r.gen_range(-0.008..0.008)),
            );
            store.insert(format!("{prefix}.ffn1.bias"), Tensor::full(&[f], 0.3));
        }
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs = vec![uniform(&mut r, &[rows, KEYPOINT_DIM], -0.25, 0.25)];
        inputs.extend(store_inputs(&store, &names));
        let names2 = names.clone();
        let cfg2 = cfg.clone();
        out.push(grad_check(
            &format!("bmp_encoder_block[{rows}tok d{d}]"),
            &inputs,
            DEFAULT_REL_TOL,
            COMPOSITE_ABS_TOL,
            move |t, v| -> anyhow::Result<Var> {
                let params = Params::from_pairs(names2.iter().cloned().zip(v[1..].iter().copied()));
                let w = params.var("bmp.embed.weight")?;
                let b = params.var("bmp.embed.bias")?;
                let proj = t.matmul(v[0], w)?;
                let proj = t.add_channel(proj, b)?;
                let pe = t.constant(bmp::positional_encoding(rows, d));
                let tokens = t.add(proj, pe)?;
                let mut probes = Vec::new();
                let memory = bmp::encode(t, tokens, &params, &cfg2, &mut probes)?;
                let sel = t.constant(Tensor::from_fn(&[1, rows], |i| if i == 0 { 1.0 } else { 0.0 }));
                let query = t.matmul(sel, memory)?;
                let pred = bmp::decode(t, query, memory, &params, &cfg2, &mut probes)?;
                Ok(signed_sum(t, pred, seed + 2)?)
            },
        ));
    }
}

/// Cross-wise channel gates. Each input map gets one strictly dominant
/// cell per channel so the max-pool argmax cannot flip mid-probe.
fn iam_block(out: &mut Vec<GradCheckReport>) {
    for (h, w, d, seed) in [(5usize, 5usize, 3usize, 91u64), (4, 7, 2, 92), (6, 3, 4, 93)] {
        let cfg = RimConfig { channels: d, scale_layers: 1, heads: 1, ref_points: 1 };
        let mut store = WeightStore::new();
        materialize(&rim::param_specs(&cfg), &mut rng(seed), &mut store);
        let names: Vec<String> = store.names().filter(|n| n.starts_with("rim.iam0.")).cloned().collect();
        let mut inputs = vec![peaked_map(h, w, d, seed + 10), peaked_map(h, w, d, seed + 11)];
        inputs.extend(store_inputs(&store, &names));
        let names2 = names.clone();
        out.push(grad_check_with_step(
            &format!("iam_cross[{h}x{w}x{d}]"),
            &inputs,
            DEFAULT_REL_TOL,
            COMPOSITE_ABS_TOL,
            COMPOSITE_STEP,
            move |t, v| -> anyhow::Result<Var> {
                let params = Params::from_pairs(names2.iter().cloned().zip(v[2..].iter().copied()));
                let (hs, hx) = rim::iam_cross(t, v[0], v[1], &params, 0)?;
                // Distinct sign patterns so the two outputs cannot mask each
                // other's errors.
                let a = signed_sum(t, hs, seed + 20)?;
                let b = signed_sum(t, hx, seed + 21)?;
                Ok(t.add(a, b)?)
            },
        ));
    }
}

/// Multi-scale deformable gather. Sampling coordinates are base + W·q +
/// bias; a +0.5 bias with tiny offset weights keeps every coordinate's
/// fractional part a safe margin from the integer lattice and map edges.
fn aggregate_block(out: &mut Vec<GradCheckReport>) {
    for (n0, m0, d, seed) in [(6usize, 6usize, 3usize, 111u64), (8, 4, 2, 211), (4, 6, 3, 311)] {
        let cfg = RimConfig { channels: d, scale_layers: 2, heads: 2, ref_points: 2 };
        let mut r = rng(seed);
        let slots = cfg.heads * cfg.scale_layers * cfg.ref_points;
        let d2 = 2 * d;
        let mut tensors: Vec<(String, Tensor)> = vec![
            ("rim.def.offset.weight".into(), Tensor::from_fn(&[d2, slots * 2], |_| r.gen_range(-0.02..0.02))),
            ("rim.def.offset.bias".into(), Tensor::full(&[slots * 2], 0.5)),
            ("rim.def.attn.weight".into(), Tensor::from_fn(&[d2, slots], |_| r.gen_range(-0.3..0.3))),
            ("rim.def.attn.bias".into(), Tensor::from_fn(&[slots], |_| r.gen_range(-0.3..0.3))),
        ];
        for head in 0..cfg.heads {
            tensors.push((
                format!("rim.def.head{head}.weight"),
                Tensor::from_fn(&[d2, d2], |_| r.gen_range(-0.4..0.4)),
            ));
        }
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        let mut inputs = vec![
            uniform(&mut r, &[n0, m0, d], -1.0, 1.0),
            uniform(&mut r, &[n0, m0, d], -1.0, 1.0),
            uniform(&mut r, &[n0 / 2, m0 / 2, d], -1.0, 1.0),
            uniform(&mut r, &[n0 / 2, m0 / 2, d], -1.0, 1.0),
        ];
        inputs.extend(tensors.iter().map(|(_, t)| t.clone()));
        let names2 = names.clone();
        let cfg2 = cfg.clone();
        out.push(grad_check_with_step(
            &format!("deformable_aggregate[{n0}x{m0}x{d}]"),
            &inputs,
            DEFAULT_REL_TOL,
            COMPOSITE_ABS_TOL,
            COMPOSITE_STEP,
            move |t, v| -> anyhow::Result<Var> {
                let params = Params::from_pairs(names2.iter().cloned().zip(v[4..].iter().copied()));
                let pyr = rim::FeaturePairPyramid {
                    levels: vec![
                        rim::LevelPair { search: v[0], template: v[1] },
                        rim::LevelPair { search: v[2], template: v[3] },
                    ],
                };
                let (fx_hat, fs_hat, _) = rim::deformable_aggregate(t, &pyr, &params, &cfg2)?;
                let a = signed_sum(t, fx_hat, seed + 5)?;
                let b = signed_sum(t, fs_hat, seed + 6)?;
                Ok(t.add(a, b)?)
            },
        ));
    }
}

/// Rewrites the refinement convolutions with small weights and positive
/// biases so every pre-activation stays strictly positive under probing.
fn smooth_refine_store(store: &mut WeightStore, seed: u64) {
    let mut r = rng(seed);
    let mut fill = |name: &str, scale: f32| {
        let shape = store.get(name).unwrap().shape().to_vec();
        let t = Tensor::from_fn(&shape, |_| r.gen_range(-scale..scale));
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
    store.insert("irm.update2.bias", Tensor::from_fn(&[2], |_| r.gen_range(-0.1..0.1)));
}

/// One refinement iteration: correlation lookup, convolutional mixing, and
/// the residual motion update. Motion entries keep their displaced lookup
/// positions a safe margin from the interpolation lattice.
fn refine_block(out: &mut Vec<GradCheckReport>) {
    for (h, l, hidden, radius, seed) in
        [(8usize, 8usize, 3usize, 1usize, 61u64), (6, 4, 4, 1, 66), (5, 7, 2, 2, 71)]
    {
        let cfg = IrmConfig { iterations: 1, radius, hidden, scale_corr: true };
        let mut store = WeightStore::new();
        materialize(&irm::param_specs(&cfg, 2), &mut rng(seed), &mut store);
        smooth_refine_store(&mut store, seed + 4);
        let names: Vec<String> = store.names().filter(|n| n.starts_with("irm.")).cloned().collect();
        let mut r = rng(seed + 1);
        let mut inputs = vec![
            Tensor::from_fn(&[h, l, 2], |_| r.gen_range(0.15..0.65)),
            uniform(&mut r, &[h, l, h, l], -0.5, 0.5),
        ];
        inputs.extend(store_inputs(&store, &names));
        let names2 = names.clone();
        let cfg2 = cfg.clone();
        out.push(grad_check_with_step(
            &format!("refine_step[{h}x{l} r{radius} c{hidden}]"),
            &inputs,
            DEFAULT_REL_TOL,
            COMPOSITE_ABS_TOL,
            COMPOSITE_STEP,
            move |t, v| -> anyhow::Result<Var> {
                let params = Params::from_pairs(names2.iter().cloned().zip(v[2..].iter().copied()));
                let m1 = irm::refine_step(t, v[0], v[1], &params, &cfg2, [1.0, 1.0])?;
                Ok(signed_sum(t, m1, seed + 2)?)
            },
        ));
    }
}

/// Height and heading decoders. Hidden pre-activations stay strictly
/// positive and the (sin, cos) pair stays bounded away from the atan2
/// origin under probing.
fn heads_block(out: &mut Vec<GradCheckReport>) {
    for (h, w, d, seed) in [(5usize, 5usize, 2usize, 91u64), (4, 6, 3, 92), (6, 4, 2, 93)] {
        let cfg = IrmConfig { iterations: 1, radius: 1, hidden: 3, scale_corr: true };
        let mut store = WeightStore::new();
        materialize(&irm::param_specs(&cfg, d), &mut rng(seed), &mut store);
        let mut r = rng(seed + 3);
        for stem in ["z1", "yaw1"] {
            let wname = format!("heads.{stem}.weight");
            let shape = store.get(&wname).unwrap().shape().to_vec();
            store.insert(wname, Tensor::from_fn(&shape, |_| r.gen_range(-0.006..0.006)));
            store.insert(format!("heads.{stem}.bias"), Tensor::full(&[cfg.hidden], 0.3));
        }
        let yw_shape = store.get("heads.yaw2.weight").unwrap().shape().to_vec();
        store.insert("heads.yaw2.weight", Tensor::from_fn(&yw_shape, |_| r.gen_range(-0.05..0.05)));
        let zw_shape = store.get("heads.z2.weight").unwrap().shape().to_vec();
        store.insert("heads.z2.weight", Tensor::from_fn(&zw_shape, |_| r.gen_range(-0.3..0.3)));
        let names: Vec<String> = store.names().filter(|n| n.starts_with("heads.")).cloned().collect();
        let mut inputs = vec![uniform(&mut r, &[h, w, d], -1.0, 1.0)];
        inputs.extend(store_inputs(&store, &names));
        let names2 = names.clone();
        out.push(grad_check_with_step(
            &format!("regress_heads[{h}x{w}x{d}]"),
            &inputs,
            DEFAULT_REL_TOL,
            COMPOSITE_ABS_TOL,
            COMPOSITE_STEP,
            move |t, v| -> anyhow::Result<Var> {
                let params = Params::from_pairs(names2.iter().cloned().zip(v[1..].iter().copied()));
                let maps = irm::regress_heads(t, v[0], &params)?;
                let a = signed_sum(t, maps.z_map, seed + 6)?;
                let b = signed_sum(t, maps.theta_map, seed + 7)?;
                Ok(t.add(a, b)?)
            },
        ));
    }
}

/// Runs the whole battery; single ops probe at the default step, wide
/// multi-layer blocks at [`COMPOSITE_STEP`].
pub fn run_all() -> Vec<GradCheckReport> {
    let mut out = Vec::new();
    elementwise_binary(&mut out);
    unary(&mut out);
    arctangent(&mut out);
    channel_broadcast(&mut out);
    matmul_and_transpose(&mut out);
    softmax(&mut out);
    layer_norm(&mut out);
    conv(&mut out);
    bilinear(&mut out);
    pools(&mut out);
    shape_ops(&mut out);
    reductions(&mut out);
    deform(&mut out);
    lookup(&mut out);
    bmp_block(&mut out);
    iam_block(&mut out);
    aggregate_block(&mut out);
    refine_block(&mut out);
    heads_block(&mut out);
    out
}

pub fn all_passed(reports: &[GradCheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

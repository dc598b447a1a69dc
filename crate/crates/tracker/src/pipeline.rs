//! End-to-end glue: one training forward pass through both stages, and the
//! sequential tracking loop that carries predicted boxes from frame to
//! frame. Ground truth is consumed only when building training targets and
//! to seed the loop at frame 0 — the loop itself never sees it.

use crate::bev;
use crate::bmp;
use crate::config::PipelineConfig;
use crate::geometry::{
    wrap_angle, world_to_track_box, world_to_track_point, OrientedBox3D, KEYPOINT_DIM,
};
use crate::irm;
use crate::params::{materialize, ParamSpec, Params};
use crate::rim;
use anyhow::{bail, Context, Result};
use mtm_tensor::{Tape, Tensor, Var, WeightStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameter declarations of every stage, in materialization order.
pub fn all_param_specs(cfg: &PipelineConfig) -> Vec<ParamSpec> {
    let mut specs = bmp::param_specs(&cfg.bmp);
    specs.extend(bev::param_specs(&cfg.region, cfg.rim.channels));
    specs.extend(rim::param_specs(&cfg.rim));
    specs.extend(irm::param_specs(&cfg.irm, cfg.rim.channels));
    specs
}

/// Freshly initialized weights for the whole tracker, deterministic in
/// `seed`.
pub fn init_weights(cfg: &PipelineConfig, seed: u64) -> WeightStore {
    let mut store = WeightStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    materialize(&all_param_specs(cfg), &mut rng, &mut store);
    store
}

/// One training sample: the (possibly jittered) box history, the clouds of
/// the two consecutive frames, and the ground-truth box at frame t. The
/// last history entry is the reference box B_{t−1}.
pub struct FrameSample {
    pub history: Vec<OrientedBox3D>,
    pub prev_points: Vec<[f64; 3]>,
    pub curr_points: Vec<[f64; 3]>,
    pub gt_box: OrientedBox3D,
}

impl FrameSample {
    pub fn reference(&self) -> Result<&OrientedBox3D> {
        self.history.last().context("sample has an empty history")
    }
}

/// Everything a training step or a diagnostic run needs from one pass.
pub struct ForwardOutputs {
    pub losses: irm::Losses,
    /// Stage-I world-frame motion estimate (Δx, Δy, Δz).
    pub coarse_world: [f64; 3],
    /// Motion map before any refinement iteration, template frame.
    pub motion_initial: Tensor,
    /// Motion map after the final iteration.
    pub motion_final: Tensor,
    /// One snapshot per refinement iteration.
    pub iter_snapshots: Vec<Tensor>,
    pub n_pos: usize,
}

/// Constant matrix turning the 27 predicted keypoint offsets (world frame)
/// into their mean planar motion expressed in the reference box's frame:
/// out = offsets · M, with the 1/9 keypoint average and the −yaw rotation
/// folded into one [27, 2] operator.
fn world_to_track_mean(yaw: f64) -> Tensor {
    let (cos, sin) = (yaw.cos() as f32 / 9.0, yaw.sin() as f32 / 9.0);
    Tensor::from_fn(&[KEYPOINT_DIM, 2], |idx| {
        let (row, col) = (idx / 2, idx % 2);
        match (row % 3, col) {
            (0, 0) => cos,
            (1, 0) => sin,
            (0, 1) => -sin,
            (1, 1) => cos,
            _ => 0.0,
        }
    })
}

fn crop_and_voxelize(
    tape: &mut Tape,
    points: &[[f64; 3]],
    reference: &OrientedBox3D,
    cfg: &PipelineConfig,
) -> Var {
    let cropped = bev::crop_region(points, reference, &cfg.region);
    tape.constant(bev::voxelize(&cropped, &cfg.region))
}

struct StageTwo {
    motion0: Var,
    motion_n: Var,
    iter_snapshots: Vec<Tensor>,
    maps: irm::RegressionMaps,
}

/// Both stages up to the regression maps. `zero_init` replaces the stage-I
/// motion prior with a zero field (ablation switch); the map is still
/// refined either way.
fn stage_two(
    tape: &mut Tape,
    history: &[OrientedBox3D],
    prev_points: &[[f64; 3]],
    curr_points: &[[f64; 3]],
    params: &Params,
    cfg: &PipelineConfig,
    zero_init: bool,
) -> Result<(bmp::BmpOutputs, StageTwo)> {
    let reference = *history.last().context("empty history")?;
    let stage_one = bmp::bmp_forward(tape, history, params, &cfg.bmp)?;

    let vx_prev = crop_and_voxelize(tape, prev_points, &reference, cfg);
    let vx_curr = crop_and_voxelize(tape, curr_points, &reference, cfg);
    let fx = bev::encode_bev(tape, vx_prev, params, &cfg.region)?;
    let fs = bev::encode_bev(tape, vx_curr, params, &cfg.region)?;

    let centered = OrientedBox3D::new([0.0; 3], reference.size, 0.0)?;
    let mask = tape.constant(bev::footprint_mask(&centered, &cfg.region));
    let interacted = rim::rim_forward(tape, fx, mask, fs, params, &cfg.rim)?;

    let w = irm::build_corr(tape, interacted.fx_hat, interacted.fs_hat, cfg.irm.scale_corr)?;
    let (h, l) = cfg.region.bev_extents()?;
    let motion0 = if zero_init {
        tape.constant(Tensor::zeros(&[h, l, 2]))
    } else {
        let rot = tape.constant(world_to_track_mean(reference.yaw));
        let v_track = tape.matmul(stage_one.pred_offsets, rot)?;
        irm::init_motion(tape, v_track, h, l)?
    };

    let cell = [cfg.region.cell_size_x() as f32, cfg.region.cell_size_y() as f32];
    let (motion_n, iter_snapshots) = irm::refine(tape, motion0, w, params, &cfg.irm, cell)?;
    let maps = irm::regress_heads(tape, interacted.fs_hat, params)?;
    Ok((stage_one, StageTwo { motion0, motion_n, iter_snapshots, maps }))
}

/// Occupancy over the union of the reference footprint (grid center) and
/// the ground-truth footprint, both in the reference frame.
pub fn union_occupancy(
    reference: &OrientedBox3D,
    gt: &OrientedBox3D,
    cfg: &PipelineConfig,
) -> Result<Tensor> {
    let centered = OrientedBox3D::new([0.0; 3], reference.size, 0.0)?;
    let mut occ = bev::footprint_mask(&centered, &cfg.region);
    let gt_track = world_to_track_box(gt, reference);
    let gt_occ = bev::footprint_mask(&gt_track, &cfg.region);
    for (a, b) in occ.data_mut().iter_mut().zip(gt_occ.data()) {
        *a = a.max(*b);
    }
    Ok(occ)
}

/// Full training pass: both stages plus loss terms against the sample's
/// ground truth.
pub fn forward_train(
    tape: &mut Tape,
    sample: &FrameSample,
    params: &Params,
    cfg: &PipelineConfig,
) -> Result<ForwardOutputs> {
    let reference = *sample.reference()?;
    let (stage_one, two) = stage_two(
        tape,
        &sample.history,
        &sample.prev_points,
        &sample.curr_points,
        params,
        cfg,
        false,
    )?;

    // Targets, all in the reference frame: keypoint offsets to the true
    // box, a constant rigid-motion field, and constant z / heading maps.
    let gt_offsets = {
        let want = sample.gt_box.keypoints();
        let have = reference.keypoints();
        Tensor::new(
            &[1, KEYPOINT_DIM],
            want.0.iter().zip(have.0.iter()).map(|(w, h)| (w - h) as f32).collect(),
        )?
    };
    let gt_center = world_to_track_point(sample.gt_box.center, &reference);
    let (h, l) = cfg.region.bev_extents()?;
    let gt_motion = Tensor::from_fn(&[h, l, 2], |i| {
        if i % 2 == 0 {
            gt_center[0] as f32
        } else {
            gt_center[1] as f32
        }
    });
    let gt_z = Tensor::full(&[h, l, 1], gt_center[2] as f32);
    let gt_theta =
        Tensor::full(&[h, l, 1], wrap_angle(sample.gt_box.yaw - reference.yaw) as f32);
    let occupancy = union_occupancy(&reference, &sample.gt_box, cfg)?;

    let losses = irm::losses(
        tape,
        stage_one.pred_offsets,
        &gt_offsets,
        two.motion_n,
        &gt_motion,
        &two.maps,
        &gt_z,
        &gt_theta,
        &occupancy,
    )?;
    let n_pos = losses.n_pos;
    Ok(ForwardOutputs {
        losses,
        coarse_world: stage_one.coarse,
        motion_initial: tape.value(two.motion0).clone(),
        motion_final: tape.value(two.motion_n).clone(),
        iter_snapshots: two.iter_snapshots,
        n_pos,
    })
}

/// Which parts of the tracker run during a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackerVariant {
    /// Both stages.
    Full,
    /// Stage I only: dead-reckon the box by the coarse motion.
    BmpOnly,
    /// Both stages, but the refinement starts from a zero motion field.
    NoMotionInit,
}

impl std::str::FromStr for TrackerVariant {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrackerVariant::Full),
            "bmp-only" => Ok(TrackerVariant::BmpOnly),
            "no-motion-init" => Ok(TrackerVariant::NoMotionInit),
            other => bail!("unknown tracker variant '{other}' (full | bmp-only | no-motion-init)"),
        }
    }
}

pub struct TrackOptions {
    pub variant: TrackerVariant,
    /// Cap on how many real past boxes feed stage I (the model's history
    /// window still pads to its configured length). None keeps them all.
    pub history_len: Option<usize>,
    /// Keep per-iteration motion-map snapshots in the diagnostics.
    pub dump_iters: bool,
}

impl Default for TrackOptions {
    fn default() -> Self {
        TrackOptions { variant: TrackerVariant::Full, history_len: None, dump_iters: false }
    }
}

/// Per-frame observability: what the tracker did, not what it should have.
pub struct FrameDiagnostics {
    pub frame: usize,
    /// Real history boxes available when this frame was predicted.
    pub history_used: usize,
    /// Stage-I world-frame motion estimate.
    pub coarse_world: [f64; 3],
    /// The decoded cell fell outside the search grid and was clamped.
    pub clamped: bool,
    /// Refinement snapshots (present when dump_iters is set).
    pub iter_snapshots: Vec<Tensor>,
}

/// Runs the tracker over a cloud sequence from a first-frame box. By
/// construction this consumes no ground truth: the signature only admits
/// the seed box. Returns one box per frame (frame 0 echoes the seed).
pub fn track_sequence(
    clouds: &[Vec<[f64; 3]>],
    seed_box: OrientedBox3D,
    store: &WeightStore,
    cfg: &PipelineConfig,
    opts: &TrackOptions,
) -> Result<(Vec<OrientedBox3D>, Vec<FrameDiagnostics>)> {
    if clouds.is_empty() {
        bail!("track_sequence needs at least one frame");
    }
    let window = opts.history_len.unwrap_or(usize::MAX).max(1);
    let mut boxes = vec![seed_box];
    let mut diags = Vec::new();
    let mut history: Vec<OrientedBox3D> = vec![seed_box];

    for t in 1..clouds.len() {
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, store);
        let history_used = history.len();

        let predicted = match opts.variant {
            TrackerVariant::BmpOnly => {
                let out = bmp::bmp_forward(&mut tape, &history, &params, &cfg.bmp)
                    .with_context(|| format!("stage I at frame {t}"))?;
                let prev = *history.last().expect("non-empty history");
                let center = [
                    prev.center[0] + out.coarse[0],
                    prev.center[1] + out.coarse[1],
                    prev.center[2] + out.coarse[2],
                ];
                diags.push(FrameDiagnostics {
                    frame: t,
                    history_used,
                    coarse_world: out.coarse,
                    clamped: false,
                    iter_snapshots: Vec::new(),
                });
                OrientedBox3D::new(center, prev.size, prev.yaw)?
            }
            variant => {
                let reference = *history.last().expect("non-empty history");
                let (stage_one, two) = stage_two(
                    &mut tape,
                    &history,
                    &clouds[t - 1],
                    &clouds[t],
                    &params,
                    cfg,
                    variant == TrackerVariant::NoMotionInit,
                )
                .with_context(|| format!("tracker forward at frame {t}"))?;
                let decoded = irm::read_state(
                    tape.value(two.motion_n),
                    tape.value(two.maps.z_map),
                    tape.value(two.maps.theta_map),
                    &reference,
                    &cfg.region,
                )?;
                diags.push(FrameDiagnostics {
                    frame: t,
                    history_used,
                    coarse_world: stage_one.coarse,
                    clamped: decoded.clamped,
                    iter_snapshots: if opts.dump_iters { two.iter_snapshots } else { Vec::new() },
                });
                decoded.boxed
            }
        };

        boxes.push(predicted);
        history.push(predicted);
        let keep = history.len().min(window);
        history.drain(..history.len() - keep);
    }
    Ok((boxes, diags))
}

/// Small-but-complete configuration for fast tests: 8×8 BEV grid, two z
/// layers, minimal widths everywhere.
#[cfg(test)]
pub(crate) fn tiny_pipeline_cfg() -> PipelineConfig {
    use crate::config::{BmpConfig, IrmConfig, RegionConfig, RimConfig, TrainConfig};
    PipelineConfig {
        region: RegionConfig {
            x_min: -1.6,
            x_max: 1.6,
            y_min: -1.6,
            y_max: 1.6,
            z_min: -1.0,
            z_max: 1.0,
            voxel_x: 0.4,
            voxel_y: 0.4,
            voxel_z: 1.0,
            bev_stride: 1,
        },
        bmp: BmpConfig {
            history_len: 3,
            token_dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 16,
        },
        rim: RimConfig { channels: 4, scale_layers: 2, heads: 2, ref_points: 2 },
        irm: IrmConfig { iterations: 2, radius: 1, hidden: 4, scale_corr: true },
        train: TrainConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn box_at(x: f64, y: f64, yaw: f64) -> OrientedBox3D {
        OrientedBox3D::new([x, y, 0.0], [1.2, 0.8, 0.6], yaw).unwrap()
    }

    fn cloud_around(b: &OrientedBox3D, n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    b.center[0] + rng.gen_range(-0.6..0.6),
                    b.center[1] + rng.gen_range(-0.4..0.4),
                    b.center[2] + rng.gen_range(-0.3..0.3),
                ]
            })
            .collect()
    }

    fn sample_moving() -> FrameSample {
        let h: Vec<OrientedBox3D> =
            (0..3).map(|t| box_at(-0.4 + 0.2 * t as f64, 0.1 * t as f64, 0.05)).collect();
        let reference = *h.last().unwrap();
        let gt = box_at(reference.center[0] + 0.2, reference.center[1] + 0.1, 0.1);
        FrameSample {
            history: h,
            prev_points: cloud_around(&reference, 120, 9),
            curr_points: cloud_around(&gt, 120, 10),
            gt_box: gt,
        }
    }

    #[test]
    fn init_weights_is_seed_deterministic() {
        let cfg = tiny_pipeline_cfg();
        let a = init_weights(&cfg, 7);
        let b = init_weights(&cfg, 7);
        let c = init_weights(&cfg, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Every stage contributes parameters.
        for prefix in ["bmp.", "bev.", "rim.", "irm.", "heads."] {
            assert!(a.names().any(|n| n.starts_with(prefix)), "missing {prefix}");
        }
    }

    #[test]
    fn training_gradients_reach_every_stage() {
        let cfg = tiny_pipeline_cfg();
        let store = init_weights(&cfg, 11);
        let sample = sample_moving();
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let out = forward_train(&mut tape, &sample, &params, &cfg).unwrap();
        assert!(out.n_pos > 0, "target must occupy grid cells");
        assert!(tape.value(out.losses.total).item().is_finite());
        tape.backward(out.losses.total).unwrap();

        for prefix in ["bmp.", "bev.", "rim.", "irm.", "heads."] {
            let mut any = false;
            for (name, var) in params.entries() {
                if !name.starts_with(prefix) {
                    continue;
                }
                if let Some(g) = tape.grad(var) {
                    if g.data().iter().any(|v| *v != 0.0) {
                        any = true;
                        break;
                    }
                }
            }
            assert!(any, "no gradient reached {prefix}");
        }
    }

    #[test]
    fn distant_target_still_trains() {
        let cfg = tiny_pipeline_cfg();
        let store = init_weights(&cfg, 13);
        let mut sample = sample_moving();
        sample.gt_box = box_at(50.0, 50.0, 0.0); // far outside the region
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let out = forward_train(&mut tape, &sample, &params, &cfg).unwrap();
        // The reference footprint keeps the mask non-empty even on a miss,
        // and the loss stays finite despite the large motion target.
        assert!(out.n_pos > 0);
        assert!(tape.value(out.losses.total).item().is_finite());
    }

    #[test]
    fn empty_clouds_still_run() {
        let cfg = tiny_pipeline_cfg();
        let store = init_weights(&cfg, 17);
        let sample = FrameSample {
            history: vec![box_at(0.0, 0.0, 0.0)],
            prev_points: Vec::new(),
            curr_points: Vec::new(),
            gt_box: box_at(0.1, 0.0, 0.0),
        };
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let out = forward_train(&mut tape, &sample, &params, &cfg).unwrap();
        assert!(tape.value(out.losses.total).item().is_finite());
    }

    #[test]
    fn single_frame_returns_the_seed_box() {
        let cfg = tiny_pipeline_cfg();
        let store = init_weights(&cfg, 19);
        let seed = box_at(0.3, -0.2, 0.4);
        let clouds = vec![cloud_around(&seed, 50, 3)];
        let (boxes, diags) =
            track_sequence(&clouds, seed, &store, &cfg, &TrackOptions::default()).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0], seed);
        assert!(diags.is_empty());
    }

    #[test]
    fn tracking_is_bit_deterministic() {
        let cfg = tiny_pipeline_cfg();
        let store = init_weights(&cfg, 23);
        let seed = box_at(0.0, 0.0, 0.0);
        let clouds: Vec<_> = (0..4).map(|t| cloud_around(&box_at(0.1 * t as f64, 0.0, 0.0), 80, t)).collect();
        let run = || track_sequence(&clouds, seed, &store, &cfg, &TrackOptions::default()).unwrap().0;
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.center, y.center);
            assert_eq!(x.yaw, y.yaw);
        }
    }

    #[test]
    fn history_window_caps_real_boxes() {
        let cfg = tiny_pipeline_cfg();
        let store = init_weights(&cfg, 29);
        let seed = box_at(0.0, 0.0, 0.0);
        let clouds: Vec<_> = (0..6).map(|t| cloud_around(&seed, 60, 40 + t)).collect();
        let opts = TrackOptions { history_len: Some(2), ..TrackOptions::default() };
        let (_, diags) = track_sequence(&clouds, seed, &store, &cfg, &opts).unwrap();
        for d in &diags {
            assert_eq!(d.history_used, d.frame.min(2), "frame {}", d.frame);
        }
        // Uncapped: the buffer grows with t.
        let (_, diags) =
            track_sequence(&clouds, seed, &store, &cfg, &TrackOptions::default()).unwrap();
        for d in &diags {
            assert_eq!(d.history_used, d.frame);
        }
    }

    #[test]
    fn zeroed_stage_one_head_makes_bmp_only_static() {
        let cfg = tiny_pipeline_cfg();
        let mut store = init_weights(&cfg, 31);
        let d = cfg.bmp.token_dim;
        store.insert("bmp.head.weight", Tensor::zeros(&[d, KEYPOINT_DIM]));
        store.insert("bmp.head.bias", Tensor::zeros(&[KEYPOINT_DIM]));
        let seed = box_at(0.2, 0.1, -0.3);
        let clouds: Vec<_> = (0..4).map(|t| cloud_around(&seed, 50, 50 + t)).collect();
        let opts = TrackOptions { variant: TrackerVariant::BmpOnly, ..TrackOptions::default() };
        let (boxes, _) = track_sequence(&clouds, seed, &store, &cfg, &opts).unwrap();
        for b in &boxes {
            assert_eq!(b.center, seed.center);
            assert_eq!(b.yaw, seed.yaw);
        }
    }

    #[test]
    fn dump_iters_keeps_one_snapshot_per_iteration() {
        let cfg = tiny_pipeline_cfg();
        let store = init_weights(&cfg, 37);
        let seed = box_at(0.0, 0.0, 0.0);
        let clouds: Vec<_> = (0..3).map(|t| cloud_around(&seed, 60, 60 + t)).collect();
        let opts = TrackOptions { dump_iters: true, ..TrackOptions::default() };
        let (_, diags) = track_sequence(&clouds, seed, &store, &cfg, &opts).unwrap();
        for d in &diags {
            assert_eq!(d.iter_snapshots.len(), cfg.irm.iterations);
        }
        let opts = TrackOptions::default();
        let (_, diags) = track_sequence(&clouds, seed, &store, &cfg, &opts).unwrap();
        assert!(diags.iter().all(|d| d.iter_snapshots.is_empty()));
    }

    #[test]
    fn variant_parsing_accepts_known_names_only() {
        assert_eq!("full".parse::<TrackerVariant>().unwrap(), TrackerVariant::Full);
        assert_eq!("bmp-only".parse::<TrackerVariant>().unwrap(), TrackerVariant::BmpOnly);
        assert_eq!(
            "no-motion-init".parse::<TrackerVariant>().unwrap(),
            TrackerVariant::NoMotionInit
        );
        assert!("bmp".parse::<TrackerVariant>().is_err());
    }
}

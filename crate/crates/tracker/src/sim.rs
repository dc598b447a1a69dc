//! Synthetic scene simulator: a rigid box-surface point template moved
//! along parameterized trajectories, with per-frame Gaussian sensor noise
//! and Bernoulli point dropout. Everything is deterministic under the spec
//! seed.

use crate::geometry::{track_to_world_point, wrap_angle, OrientedBox3D};
use crate::io::{self, TrajectoryEntry};
use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    /// Fixed heading, fixed speed.
    ConstantVelocity,
    /// Heading rotates by the yaw rate each frame; the box follows it.
    Turn,
    /// Alternates five moving frames with five stationary ones.
    StopGo,
    /// Per-frame random heading and speed perturbations.
    RandomWalk,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant-velocity" => Ok(TrajectoryKind::ConstantVelocity),
            "turn" => Ok(TrajectoryKind::Turn),
            "stop-go" => Ok(TrajectoryKind::StopGo),
            "random-walk" => Ok(TrajectoryKind::RandomWalk),
            other => anyhow::bail!(
                "unknown trajectory kind '{other}' (constant-velocity | turn | stop-go | random-walk)"
            ),
        }
    }
}

impl std::fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrajectoryKind::ConstantVelocity => "constant-velocity",
            TrajectoryKind::Turn => "turn",
            TrajectoryKind::StopGo => "stop-go",
            TrajectoryKind::RandomWalk => "random-walk",
        })
    }
}

/// Full description of one simulated tracklet.
#[derive(Debug, Clone)]
pub struct SimSpec {
    pub kind: TrajectoryKind,
    /// Meters per frame while moving.
    pub speed: f64,
    /// Radians per frame (used by the turning trajectory).
    pub yaw_rate: f64,
    pub frames: usize,
    /// Surface points sampled once per tracklet.
    pub points: usize,
    /// Per-point probability of being dropped each frame.
    pub dropout: f64,
    /// Std-dev of the per-coordinate Gaussian sensor noise, meters.
    pub noise_sigma: f64,
    /// Box extents (l, w, h).
    pub size: [f64; 3],
    pub start: [f64; 3],
    pub start_yaw: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            kind: TrajectoryKind::ConstantVelocity,
            speed: 1.0,
            yaw_rate: 0.0,
            frames: 12,
            points: 500,
            dropout: 0.1,
            noise_sigma: 0.02,
            size: [3.9, 1.6, 1.56],
            start: [0.0, 0.0, 0.0],
            start_yaw: 0.0,
            seed: 0,
        }
    }
}

pub struct TrackletFrame {
    pub frame_id: u64,
    pub points: Vec<[f64; 3]>,
}

/// A simulated target sequence with its ground-truth boxes.
pub struct Tracklet {
    pub frames: Vec<TrackletFrame>,
    pub gt: Vec<OrientedBox3D>,
}

impl Tracklet {
    pub fn clouds(&self) -> Vec<Vec<[f64; 3]>> {
        self.frames.iter().map(|f| f.points.clone()).collect()
    }
}

/// Samples `n` points uniformly over the box surface, areas weighted per
/// face pair, in box-local coordinates.
pub fn surface_template(size: [f64; 3], n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (l, w, h) = (size[0], size[1], size[2]);
    // Cumulative face areas: ±z (top/bottom), ±y (sides), ±x (ends).
    let areas = [l * w, l * w, l * h, l * h, w * h, w * h];
    let total: f64 = areas.iter().sum();
    let mut cum = [0.0f64; 6];
    let mut acc = 0.0;
    for (c, a) in cum.iter_mut().zip(areas) {
        acc += a;
        *c = acc;
    }
    (0..n)
        .map(|_| {
            let pick = rng.gen_range(0.0..total);
            let face = cum.iter().position(|c| pick < *c).unwrap_or(5);
            let u: f64 = rng.gen_range(-0.5..0.5);
            let v: f64 = rng.gen_range(-0.5..0.5);
            match face {
                0 => [u * l, v * w, h / 2.0],
                1 => [u * l, v * w, -h / 2.0],
                2 => [u * l, w / 2.0, v * h],
                3 => [u * l, -w / 2.0, v * h],
                4 => [l / 2.0, u * w, v * h],
                _ => [-l / 2.0, u * w, v * h],
            }
        })
        .collect()
}

/// Box pose per frame along the configured trajectory.
fn poses(spec: &SimSpec, rng: &mut ChaCha8Rng) -> Vec<([f64; 3], f64)> {
    let mut out = Vec::with_capacity(spec.frames);
    let mut center = spec.start;
    let mut yaw = spec.start_yaw;
    for t in 0..spec.frames {
        out.push((center, yaw));
        let (step, turn) = match spec.kind {
            TrajectoryKind::ConstantVelocity => (spec.speed, 0.0),
            TrajectoryKind::Turn => (spec.speed, spec.yaw_rate),
            TrajectoryKind::StopGo => {
                let moving = (t / 5) % 2 == 0;
                (if moving { spec.speed } else { 0.0 }, 0.0)
            }
            TrajectoryKind::RandomWalk => {
                (spec.speed * rng.gen_range(0.5..1.5), rng.gen_range(-0.3..0.3))
            }
        };
        yaw = wrap_angle(yaw + turn);
        center[0] += step * yaw.cos();
        center[1] += step * yaw.sin();
    }
    out
}

/// Generates the tracklet: one rigid template, transformed per frame, with
/// fresh noise and dropout draws each frame.
pub fn simulate(spec: &SimSpec) -> Result<Tracklet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let template = surface_template(spec.size, spec.points, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).context("noise sigma must be a finite std-dev")?;

    let track = poses(spec, &mut rng);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    for (t, (center, yaw)) in track.iter().enumerate() {
        let boxed = OrientedBox3D::new(*center, spec.size, *yaw)?;
        let mut pts = Vec::with_capacity(template.len());
        for local in &template {
            // Draw keep/noise for every template point so the stream
            // consumption is independent of the dropout outcome.
            let keep = !rng.gen_bool(spec.dropout.clamp(0.0, 1.0));
            let n = [noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)];
            if !keep {
                continue;
            }
            let world = track_to_world_point(*local, &boxed);
            pts.push([world[0] + n[0], world[1] + n[1], world[2] + n[2]]);
        }
        frames.push(TrackletFrame { frame_id: t as u64, points: pts });
        gt.push(boxed);
    }
    Ok(Tracklet { frames, gt })
}

/// The seeded training suite: all four trajectory kinds with velocity
/// directions spread symmetrically over the plane, so the learned motion
/// prior cannot overfit one heading.
pub fn training_suite(seed: u64, frames: usize, points: usize) -> Vec<SimSpec> {
    let mut specs = Vec::new();
    let quarter = std::f64::consts::FRAC_PI_2;
    for (i, yaw) in [0.0, quarter, 2.0 * quarter, -quarter].into_iter().enumerate() {
        specs.push(SimSpec {
            kind: TrajectoryKind::ConstantVelocity,
            start_yaw: yaw,
            seed: seed.wrapping_add(i as u64),
            frames,
            points,
            ..SimSpec::default()
        });
    }
    for (i, rate) in [0.12, -0.12].into_iter().enumerate() {
        specs.push(SimSpec {
            kind: TrajectoryKind::Turn,
            speed: 0.8,
            yaw_rate: rate,
            start_yaw: 0.4 * i as f64,
            seed: seed.wrapping_add(10 + i as u64),
            frames,
            points,
            ..SimSpec::default()
        });
    }
    specs.push(SimSpec {
        kind: TrajectoryKind::StopGo,
        speed: 0.8,
        start_yaw: 0.7,
        seed: seed.wrapping_add(20),
        frames,
        points,
        ..SimSpec::default()
    });
    specs.push(SimSpec {
        kind: TrajectoryKind::RandomWalk,
        speed: 0.5,
        start_yaw: -1.2,
        seed: seed.wrapping_add(21),
        frames,
        points,
        ..SimSpec::default()
    });
    specs
}

/// Writes the tracklet as a directory of per-frame velodyne-format scans
/// plus a `gt.txt` trajectory file.
pub fn write_tracklet(dir: &Path, tracklet: &Tracklet) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating tracklet directory {}", dir.display()))?;
    for frame in &tracklet.frames {
        let records: Vec<[f32; 4]> = frame
            .points
            .iter()
            .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32, 0.0])
            .collect();
        let path = dir.join(format!("{:06}.bin", frame.frame_id));
        io::write_kitti_bin(&path, &records)?;
    }
    let entries: Vec<TrajectoryEntry> = tracklet
        .frames
        .iter()
        .zip(&tracklet.gt)
        .map(|(f, b)| TrajectoryEntry { frame: f.frame_id, boxed: *b })
        .collect();
    io::write_trajectory(&dir.join("gt.txt"), &entries)?;
    Ok(())
}

/// Reads back a tracklet directory written by [`write_tracklet`]: the
/// `gt.txt` trajectory names the frames, each loaded from its scan file.
pub fn read_tracklet(dir: &Path) -> Result<Tracklet> {
    let entries = io::read_trajectory(&dir.join("gt.txt"))
        .with_context(|| format!("reading tracklet ground truth in {}", dir.display()))?;
    let mut frames = Vec::with_capacity(entries.len());
    let mut gt = Vec::with_capacity(entries.len());
    for e in entries {
        let path = dir.join(format!("{:06}.bin", e.frame));
        let records = io::read_kitti_bin(&path)?;
        frames.push(TrackletFrame {
            frame_id: e.frame,
            points: records.iter().map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]).collect(),
        });
        gt.push(e.boxed);
    }
    Ok(Tracklet { frames, gt })
}

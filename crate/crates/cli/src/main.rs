//! Command-line front end: synthetic data generation, training, tracking,
//! evaluation, gradient checking, and per-stage timing.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mtm_tensor::{Tape, Tensor, WeightStore};
use mtm_tracker::config::PipelineConfig;
use mtm_tracker::geometry::OrientedBox3D;
use mtm_tracker::params::Params;
use mtm_tracker::pipeline::{
    forward_train, init_weights, track_sequence, FrameSample, TrackOptions, TrackerVariant,
};
use mtm_tracker::sim::{
    read_tracklet, simulate, training_suite, write_tracklet, SimSpec, Tracklet, TrajectoryKind,
};
use mtm_tracker::train::{run_training, Trainer};
use mtm_tracker::{bev, bmp, gradsuite, io, irm, ope, rim};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

#[derive(Parser)]
#[command(name = "mtm", version, about = "Motion-centric 3D single-object tracking toolkit")]
struct Cli {
    /// Pipeline configuration file (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic tracklets: per-frame scans plus ground truth.
    Simulate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Emit the full training suite into numbered subdirectories.
        #[arg(long)]
        suite: bool,
        /// Trajectory kind for a single tracklet.
        #[arg(long, default_value = "constant-velocity")]
        kind: TrajectoryKind,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        /// Surface points sampled per frame before dropout.
        #[arg(long, default_value_t = 500)]
        points: usize,
        /// Meters per frame while moving.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Radians per frame for the turning trajectory.
        #[arg(long, default_value_t = 0.0)]
        yaw_rate: f64,
        /// Per-point Gaussian noise sigma in meters.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Per-point drop probability.
        #[arg(long, default_value_t = 0.1)]
        dropout: f64,
    },
    /// Train tracker weights on a directory of simulated tracklets.
    Train {
        /// One tracklet directory, or a directory of tracklet directories.
        #[arg(long)]
        data: PathBuf,
        /// Output weight file.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint file (periodic saves, divergence rollback, resume).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the checkpoint instead of initializing fresh.
        #[arg(long, requires = "checkpoint")]
        resume: bool,
    },
    /// Run the tracker over a scan directory from a seed box.
    Track {
        /// Directory of velodyne-format .bin scans, one per frame.
        #[arg(long)]
        kitti_bin_dir: PathBuf,
        /// Trajectory file; its first line seeds the tracker.
        #[arg(long)]
        boxes: PathBuf,
        /// Weight file from training.
        #[arg(long)]
        weights: PathBuf,
        /// Output trajectory file.
        #[arg(long)]
        out: PathBuf,
        /// Pipeline variant: full | bmp-only | no-motion-init.
        #[arg(long, default_value = "full")]
        variant: TrackerVariant,
        /// Cap on how many past boxes feed the motion predictor.
        #[arg(long)]
        history_len: Option<usize>,
        /// Write per-frame, per-iteration motion-map snapshots to this file.
        #[arg(long)]
        dump_iters: Option<PathBuf>,
    },
    /// Score a predicted trajectory against ground truth.
    Eval {
        /// Predicted trajectory file.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth trajectory file.
        #[arg(long)]
        gt: PathBuf,
        /// Prefix for sweep-curve CSVs (<prefix>_success.csv, <prefix>_precision.csv).
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run the finite-difference gradient battery; non-zero exit on failure.
    Gradcheck,
    /// Time each pipeline stage on synthetic inputs.
    Bench,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Simulate { out, suite, kind, frames, points, speed, yaw_rate, noise, dropout } => {
            if suite {
                for (i, spec) in training_suite(cli.seed, frames, points).into_iter().enumerate() {
                    let sub = out.join(format!("{i:02}-{}", spec.kind));
                    write_tracklet(&sub, &simulate(&spec)?)?;
                    println!("wrote {}", sub.display());
                }
            } else {
                let spec = SimSpec {
                    kind,
                    speed,
                    yaw_rate,
                    frames,
                    points,
                    dropout,
                    noise_sigma: noise,
                    seed: cli.seed,
                    ..SimSpec::default()
                };
                write_tracklet(&out, &simulate(&spec)?)?;
                println!("wrote {frames} frames to {}", out.display());
            }
            Ok(())
        }
        Command::Train { data, out, checkpoint, resume } => {
            train_cmd(&cfg, cli.seed, &data, &out, checkpoint.as_deref(), resume)
        }
        Command::Track { kitti_bin_dir, boxes, weights, out, variant, history_len, dump_iters } => {
            track_cmd(&cfg, &kitti_bin_dir, &boxes, &weights, &out, variant, history_len, dump_iters.as_deref())
        }
        Command::Eval { pred, gt, plot } => eval_cmd(&pred, &gt, plot.as_deref()),
        Command::Gradcheck => gradcheck_cmd(),
        Command::Bench => bench_cmd(&cfg, cli.seed),
    }
}

/// Loads either one tracklet directory or every tracklet subdirectory.
fn load_tracklets(data: &Path) -> Result<Vec<Tracklet>> {
    if data.join("gt.txt").is_file() {
        return Ok(vec![read_tracklet(data)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data)
        .with_context(|| format!("listing {}", data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("gt.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no tracklets under {} (expected gt.txt files)", data.display());
    }
    dirs.iter().map(|d| read_tracklet(d)).collect()
}

fn train_cmd(
    cfg: &PipelineConfig,
    seed: u64,
    data: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    resume: bool,
) -> Result<()> {
    let tracklets = load_tracklets(data)?;
    log::info!("training on {} tracklets for {} steps", tracklets.len(), cfg.train.steps);
    let mut trainer = if resume {
        let path = checkpoint.expect("clap enforces --checkpoint with --resume");
        let ck = WeightStore::load(path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        Trainer::resume(cfg, &ck, seed)?
    } else {
        Trainer::new(cfg, seed)
    };
    let report = run_training(&mut trainer, &tracklets, checkpoint)?;
    trainer.store.save(out).with_context(|| format!("writing weights {}", out.display()))?;
    if let Some(path) = checkpoint {
        trainer.checkpoint().save(path)?;
    }
    println!(
        "trained {} steps: loss {:.6} -> {:.6}; weights at {}",
        report.losses.len(),
        report.initial_loss,
        report.final_loss,
        out.display()
    );
    Ok(())
}

/// Lists the scan files of a frame directory in ascending frame order.
fn scan_frames(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().map_or(true, |e| e != "bin") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id: u64 = stem
            .parse()
            .with_context(|| format!("scan name {} is not a numeric frame id", path.display()))?;
        frames.push((id, path));
    }
    if frames.is_empty() {
        bail!("no .bin scans under {}", dir.display());
    }
    frames.sort();
    Ok(frames)
}

#[allow(clippy::too_many_arguments)]
fn track_cmd(
    cfg: &PipelineConfig,
    scan_dir: &Path,
    boxes: &Path,
    weights: &Path,
    out: &Path,
    variant: TrackerVariant,
    history_len: Option<usize>,
    dump_iters: Option<&Path>,
) -> Result<()> {
    let frames = scan_frames(scan_dir)?;
    let mut clouds = Vec::with_capacity(frames.len());
    for (_, path) in &frames {
        let records = io::read_kitti_bin(path)?;
        clouds.push(records.iter().map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]).collect::<Vec<_>>());
    }
    let seeds = io::read_trajectory(boxes)?;
    let seed_box = seeds.first().context("seed trajectory is empty")?.boxed;
    let store = WeightStore::load(weights)
        .with_context(|| format!("loading weights {}", weights.display()))?;
    let opts = TrackOptions { variant, history_len, dump_iters: dump_iters.is_some() };
    let (pred, diags) = track_sequence(&clouds, seed_box, &store, cfg, &opts)?;

    let entries: Vec<io::TrajectoryEntry> = frames
        .iter()
        .zip(&pred)
        .map(|((id, _), b)| io::TrajectoryEntry { frame: *id, boxed: *b })
        .collect();
    io::write_trajectory(out, &entries)?;

    if let Some(path) = dump_iters {
        let mut dump = WeightStore::new();
        for diag in &diags {
            let frame_id = frames[diag.frame].0;
            for (i, snap) in diag.iter_snapshots.iter().enumerate() {
                dump.insert(format!("f{frame_id:06}.iter{i:02}"), snap.clone());
            }
        }
        dump.save(path).with_context(|| format!("writing snapshots {}", path.display()))?;
    }
    println!("tracked {} frames -> {}", pred.len(), out.display());
    Ok(())
}

fn write_curve(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut text = String::from("threshold,fraction\n");
    for (t, f) in curve {
        text.push_str(&format!("{t:.2},{f:.6}\n"));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn eval_cmd(pred: &Path, gt: &Path, plot: Option<&Path>) -> Result<()> {
    let read_boxes = |path: &Path| -> Result<Vec<OrientedBox3D>> {
        Ok(io::read_trajectory(path)?.iter().map(|e| e.boxed).collect())
    };
    let p = read_boxes(pred)?;
    let g = read_boxes(gt)?;
    let result = ope::evaluate_ope(&p, &g)?;
    println!("Success   {:.2}", result.success);
    println!("Precision {:.2}", result.precision);
    if let Some(prefix) = plot {
        let stem = prefix.to_string_lossy();
        let success_path = PathBuf::from(format!("{stem}_success.csv"));
        let precision_path = PathBuf::from(format!("{stem}_precision.csv"));
        write_curve(&success_path, &ope::success_curve(&result.ious))?;
        write_curve(&precision_path, &ope::precision_curve(&result.center_errors))?;
        println!("curves at {} and {}", success_path.display(), precision_path.display());
    }
    Ok(())
}

fn gradcheck_cmd() -> Result<()> {
    let reports = gradsuite::run_all();
    let mut failed = 0usize;
    for r in &reports {
        if r.passed {
            println!("PASS  {:<44} rel {:.2e}  abs {:.2e}", r.op_name, r.max_rel_err, r.max_abs_err);
        } else {
            failed += 1;
            println!(
                "FAIL  {:<44} rel {:.2e}  abs {:.2e}  {}",
                r.op_name,
                r.max_rel_err,
                r.max_abs_err,
                r.detail.as_deref().unwrap_or("")
            );
        }
    }
    println!("{} checks, {} failed", reports.len(), failed);
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}

/// Runs `f` until ~300 ms or 20 iterations have elapsed and prints the
/// mean per-iteration time.
fn time_stage(name: &str, mut f: impl FnMut() -> Result<()>) -> Result<()> {
    f()?; // warm-up
    let start = Instant::now();
    let mut reps = 0usize;
    loop {
        f()?;
        reps += 1;
        if start.elapsed() >= Duration::from_millis(300) || reps >= 20 {
            break;
        }
    }
    let per_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
    println!("{name:<16} {per_ms:>10.3} ms/iter  ({reps} iters)");
    Ok(())
}

fn bench_cmd(cfg: &PipelineConfig, seed: u64) -> Result<()> {
    let store = init_weights(cfg, seed);
    let region = &cfg.region;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud: Vec<[f64; 3]> = (0..4000)
        .map(|_| {
            [
                rng.gen_range(region.x_min..region.x_max),
                rng.gen_range(region.y_min..region.y_max),
                rng.gen_range(region.z_min..region.z_max),
            ]
        })
        .collect();
    let reference = OrientedBox3D::new([0.0, 0.0, 0.0], [3.9, 1.6, 1.56], 0.0)?;
    let (h, l) = region.bev_extents()?;
    let d = cfg.rim.channels;

    time_stage("voxelize", || {
        let cropped = bev::crop_region(&cloud, &reference, region);
        let v = bev::voxelize(&cropped, region);
        std::hint::black_box(v.numel());
        Ok(())
    })?;

    let voxels = bev::voxelize(&bev::crop_region(&cloud, &reference, region), region);
    time_stage("bev_encode", || {
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let v = tape.constant(voxels.clone());
        let y = bev::encode_bev(&mut tape, v, &params, region)?;
        std::hint::black_box(tape.value(y).numel());
        Ok(())
    })?;

    let history: Vec<OrientedBox3D> = (0..cfg.bmp.history_len)
        .map(|i| OrientedBox3D::new([i as f64, 0.0, 0.0], [3.9, 1.6, 1.56], 0.0).expect("valid box"))
        .collect();
    time_stage("bmp_forward", || {
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let out = bmp::bmp_forward(&mut tape, &history, &params, &cfg.bmp)?;
        std::hint::black_box(out.coarse);
        Ok(())
    })?;

    let feat = |seed2: u64| Tensor::from_fn(&[h, l, d], move |i| ((i as u64 ^ seed2) % 17) as f32 * 0.1 - 0.8);
    let fx_t = feat(1);
    let fs_t = feat(2);
    let mask_t = bev::footprint_mask(&reference, region);
    time_stage("rim_forward", || {
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let fx = tape.constant(fx_t.clone());
        let fs = tape.constant(fs_t.clone());
        let mask = tape.constant(mask_t.clone());
        let out = rim::rim_forward(&mut tape, fx, mask, fs, &params, &cfg.rim)?;
        std::hint::black_box(tape.value(out.fx_hat).numel());
        Ok(())
    })?;

    let cell = [region.cell_size_x() as f32, region.cell_size_y() as f32];
    time_stage("corr_volume", || {
        let mut tape = Tape::no_grad();
        let fx = tape.constant(fx_t.clone());
        let fs = tape.constant(fs_t.clone());
        let w = irm::build_corr(&mut tape, fx, fs, cfg.irm.scale_corr)?;
        std::hint::black_box(tape.value(w).numel());
        Ok(())
    })?;

    let (volume, motion) = {
        let mut tape = Tape::no_grad();
        let fx = tape.constant(fx_t.clone());
        let fs = tape.constant(fs_t.clone());
        let w = irm::build_corr(&mut tape, fx, fs, cfg.irm.scale_corr)?;
        (tape.value(w).clone(), Tensor::from_fn(&[h, l, 2], |i| (i % 5) as f32 * 0.05))
    };
    time_stage("refine_iter", || {
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let w = tape.constant(volume.clone());
        let m = tape.constant(motion.clone());
        let m1 = irm::refine_step(&mut tape, m, w, &params, &cfg.irm, cell)?;
        std::hint::black_box(tape.value(m1).numel());
        Ok(())
    })?;

    time_stage("regress_heads", || {
        let mut tape = Tape::no_grad();
        let params = Params::bind_frozen(&mut tape, &store);
        let fs = tape.constant(fs_t.clone());
        let maps = irm::regress_heads(&mut tape, fs, &params)?;
        std::hint::black_box(tape.value(maps.z_map).numel());
        Ok(())
    })?;

    let sample = {
        let spec = SimSpec { frames: cfg.bmp.history_len + 1, points: 500, seed, ..SimSpec::default() };
        let tk = simulate(&spec)?;
        let t = tk.frames.len() - 1;
        FrameSample {
            history: tk.gt[..t].to_vec(),
            prev_points: tk.frames[t - 1].points.clone(),
            curr_points: tk.frames[t].points.clone(),
            gt_box: tk.gt[t],
        }
    };
    time_stage("forward_train", || {
        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &store);
        let out = forward_train(&mut tape, &sample, &params, cfg)?;
        std::hint::black_box(tape.value(out.losses.total).item());
        Ok(())
    })?;
    Ok(())
}

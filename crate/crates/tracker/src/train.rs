//! Training driver: single-sample Adam steps over the full parameter set,
//! per-step seeded sampling and history jitter, divergence rollback, and
//! checkpoints that resume bit-exactly.

use crate::config::PipelineConfig;
use crate::geometry::OrientedBox3D;
use crate::params::Params;
use crate::pipeline::{forward_train, init_weights, FrameSample};
use crate::sim::Tracklet;
use anyhow::{bail, Context, Result};
use mtm_tensor::{Tape, Tensor, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::Path;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam state for every parameter; update math runs in f64 and is applied
/// in sorted name order, so identical states produce identical updates.
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update from per-parameter gradients; parameters without
    /// a gradient this step are treated as having a zero gradient.
    pub fn update(&mut self, store: &mut WeightStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let p = store.get_mut(&name).expect("listed name");
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let zero;
            let g = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(&shape);
                    &zero
                }
            };
            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..pd.len() {
                let gi = gd[i] as f64;
                let mi = BETA1 * md[i] as f64 + (1.0 - BETA1) * gi;
                let vi = BETA2 * vd[i] as f64 + (1.0 - BETA2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pd[i] = (pd[i] as f64 - self.lr * mhat / (vhat.sqrt() + EPS)) as f32;
            }
        }
    }
}

/// Folds parameters and optimizer state into one store for persistence.
/// Optimizer entries live under `opt.m/`, `opt.v/`, and `opt.step`, which
/// no parameter prefix uses.
pub fn to_checkpoint(store: &WeightStore, adam: &Adam) -> WeightStore {
    let mut ck = store.clone();
    for (name, t) in adam.m.iter() {
        ck.insert(format!("opt.m/{name}"), t.clone());
    }
    for (name, t) in adam.v.iter() {
        ck.insert(format!("opt.v/{name}"), t.clone());
    }
    ck.insert(
        "opt.step",
        Tensor::new(&[2], vec![(adam.step >> 32) as f32, (adam.step & 0xffff_ffff) as f32])
            .expect("step tensor"),
    );
    ck
}

/// Splits a checkpoint back into weights and optimizer state.
pub fn from_checkpoint(ck: &WeightStore, lr: f64) -> Result<(WeightStore, Adam)> {
    let mut store = WeightStore::new();
    let mut adam = Adam::new(lr);
    for (name, t) in ck.iter() {
        if let Some(rest) = name.strip_prefix("opt.m/") {
            adam.m.insert(rest.to_string(), t.clone());
        } else if let Some(rest) = name.strip_prefix("opt.v/") {
            adam.v.insert(rest.to_string(), t.clone());
        } else if name == "opt.step" {
            let d = t.data();
            if d.len() != 2 {
                bail!("malformed opt.step entry");
            }
            adam.step = ((d[0] as u64) << 32) | d[1] as u64;
        } else {
            store.insert(name.clone(), t.clone());
        }
    }
    if store.is_empty() {
        bail!("checkpoint holds no parameters");
    }
    Ok((store, adam))
}

/// Draws one training sample: a random (tracklet, frame ≥ 1) pair, the
/// ground-truth history up to that frame with Gaussian center jitter, and
/// the two frame clouds.
pub fn draw_sample(
    tracklets: &[Tracklet],
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FrameSample> {
    if tracklets.is_empty() {
        bail!("training needs at least one tracklet");
    }
    let tk = &tracklets[rng.gen_range(0..tracklets.len())];
    if tk.frames.len() < 2 || tk.gt.len() != tk.frames.len() {
        bail!("tracklets must have ≥ 2 frames and full ground truth");
    }
    let t = rng.gen_range(1..tk.frames.len());
    let jitter = Normal::new(0.0, cfg.train.jitter_sigma).context("jitter sigma")?;
    let window = cfg.bmp.history_len.min(t);
    let history: Vec<OrientedBox3D> = tk.gt[t - window..t]
        .iter()
        .map(|b| {
            let c = [
                b.center[0] + jitter.sample(rng),
                b.center[1] + jitter.sample(rng),
                b.center[2] + jitter.sample(rng),
            ];
            OrientedBox3D::new(c, b.size, b.yaw).expect("jittered box")
        })
        .collect();
    Ok(FrameSample {
        history,
        prev_points: tk.frames[t - 1].points.clone(),
        curr_points: tk.frames[t].points.clone(),
        gt_box: tk.gt[t],
    })
}

/// Weights plus optimizer, stepping through a fixed sample stream. The
/// stream position is the Adam step count, so a resumed trainer draws
/// exactly the samples the original would have.
pub struct Trainer {
    pub store: WeightStore,
    pub adam: Adam,
    pub cfg: PipelineConfig,
    pub base_seed: u64,
}

impl Trainer {
    pub fn new(cfg: &PipelineConfig, seed: u64) -> Self {
        Trainer {
            store: init_weights(cfg, seed),
            adam: Adam::new(cfg.train.lr),
            cfg: cfg.clone(),
            base_seed: seed,
        }
    }

    pub fn resume(cfg: &PipelineConfig, checkpoint: &WeightStore, seed: u64) -> Result<Self> {
        let (store, adam) = from_checkpoint(checkpoint, cfg.train.lr)?;
        Ok(Trainer { store, adam, cfg: cfg.clone(), base_seed: seed })
    }

    /// One optimization step; returns the total loss before the update.
    pub fn step(&mut self, tracklets: &[Tracklet]) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(self.adam.step + 1);
        let sample = draw_sample(tracklets, &self.cfg, &mut rng)?;

        let mut tape = Tape::new();
        let params = Params::bind_trainable(&mut tape, &self.store);
        let out = forward_train(&mut tape, &sample, &params, &self.cfg)?;
        let loss = tape.value(out.losses.total).item() as f64;
        if !loss.is_finite() {
            bail!("loss diverged to {loss}");
        }
        tape.backward(out.losses.total)?;

        let mut grads = BTreeMap::new();
        for (name, var) in params.entries() {
            if let Some(g) = tape.grad(var) {
                grads.insert(name.to_string(), g);
            }
        }
        self.adam.update(&mut self.store, &grads);
        Ok(loss)
    }

    pub fn checkpoint(&self) -> WeightStore {
        to_checkpoint(&self.store, &self.adam)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Runs `cfg.train.steps` optimization steps. On divergence the last good
/// checkpoint is written to `checkpoint_path` (when given) and the error
/// is surfaced; otherwise the report carries the whole loss history.
pub fn run_training(
    trainer: &mut Trainer,
    tracklets: &[Tracklet],
    checkpoint_path: Option<&Path>,
) -> Result<TrainReport> {
    let steps = trainer.cfg.train.steps;
    let log_every = trainer.cfg.train.log_every.max(1);
    let checkpoint_every = trainer.cfg.train.checkpoint_every;
    let mut losses = Vec::with_capacity(steps);
    let mut last_good = trainer.checkpoint();

    for k in 0..steps {
        match trainer.step(tracklets) {
            Ok(loss) => {
                losses.push(loss);
                if k % log_every == 0 || k + 1 == steps {
                    log::info!("step {:>5}  loss {loss:.6}", k + 1);
                }
                last_good = trainer.checkpoint();
                if checkpoint_every > 0 && (k + 1) % checkpoint_every == 0 {
                    if let Some(path) = checkpoint_path {
                        last_good.save(path).context("writing periodic checkpoint")?;
                    }
                }
            }
            Err(e) => {
                if let Some(path) = checkpoint_path {
                    last_good.save(path).context("writing rollback checkpoint")?;
                    bail!(
                        "training aborted at step {} ({e}); last good checkpoint written to {}",
                        k + 1,
                        path.display()
                    );
                }
                bail!("training aborted at step {} ({e})", k + 1);
            }
        }
    }
    let initial_loss = *losses.first().context("no steps run")?;
    let final_loss = *losses.last().expect("non-empty");
    Ok(TrainReport { losses, initial_loss, final_loss })
}

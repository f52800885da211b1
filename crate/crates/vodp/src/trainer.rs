//! End-to-end optimization: Adam with decoupled weight decay, linear-warmup
//! cosine learning rate, step-dependent EMA, global-norm gradient clipping,
//! and the exhaustive shuffled window loop. One RNG seed fixes everything:
//! weight init, shuffles, and diffusion draws run on separate streams of
//! the same seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::{self, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{gather_window, window_index, DemoSet, NormStats};
use crate::error::{Error, Result};
use crate::model::VodpModel;
use crate::nn::{GraphParams, ParamStore};
use crate::policy::draw_diffusion_batch;
use crate::tensor::Tape;

/// Linear warmup to the peak over the first `warmup_ratio` of steps, then
/// cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> f64 {
    debug_assert!(step <= total_steps);
    let warmup = (total_steps as f64 * warmup_ratio).floor() as usize;
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// EMA decay at a step: min(max_decay, 1 - (1 + step/inv_gamma)^(-power)).
pub fn ema_decay(step: u64, inv_gamma: f64, power: f64, max_decay: f64) -> f64 {
    (1.0 - (1.0 + step as f64 / inv_gamma).powf(-power)).min(max_decay)
}

pub fn ema_update(shadow: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) {
    let d = decay as f32;
    for id in shadow.ids().collect::<Vec<_>>() {
        let src = params.data(id).to_vec();
        for (s, p) in shadow.data_mut(id).iter_mut().zip(src) {
            *s = d * *s + (1.0 - d) * p;
        }
    }
}

pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> AdamState {
        let m = store.ids().map(|id| vec![0.0; store.data(id).len()]).collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }
}

/// Decoupled weight decay (w -= lr*wd*w) followed by bias-corrected Adam.
pub fn adam_step(
    store: &mut ParamStore<f32>,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as f64;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    for id in store.ids().collect::<Vec<_>>() {
        let Some(g) = grads[id.0].as_ref() else { continue };
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let w = store.data_mut(id);
        let lr32 = lr as f32;
        let wd = (lr * cfg.weight_decay) as f32;
        let eps = cfg.adam_eps as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let (bc1f, bc2f) = (bc1 as f32, bc2 as f32);
        for i in 0..w.len() {
            w[i] -= wd * w[i];
            m[i] = b1f * m[i] + (1.0 - b1f) * g[i];
            v[i] = b2f * v[i] + (1.0 - b2f) * g[i] * g[i];
            let mh = m[i] / bc1f;
            let vh = v[i] / bc2f;
            w[i] -= lr32 * mh / (vh.sqrt() + eps);
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

pub struct TrainOutput {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_loss: f64,
    pub steps: u64,
    pub param_count: usize,
}

/// Fisher-Yates shuffle driven by the run's shuffle stream.
fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

pub fn train(cfg: &TrainConfig, data: &DemoSet, out_dir: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.j != cfg.model.joints {
        return Err(Error::Config(format!(
            "dataset has J={} but the model expects J={}",
            data.j, cfg.model.joints
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let stats = NormStats::from_demos(data);
    let (model, mut params) = VodpModel::build::<f32>(cfg.model, cfg.seed)?;
    let mut ema = params.clone_values();
    let mut adam = AdamState::new(&params);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut diff_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    diff_rng.set_stream(2);

    let sched = model.scheduler()?;
    let mut windows = window_index(data);
    let steps_per_epoch = windows.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?,
    );

    let t_hist = cfg.model.history;
    let n_hor = cfg.model.horizon;
    let p = cfg.model.patch_cfg().p();
    let d = cfg.model.patch_cfg().patch_dim();
    let j = cfg.model.joints;

    let mut step: u64 = 0;
    let mut last_loss = f64::NAN;
    let t0 = Instant::now();
    for epoch in 0..cfg.epochs {
        shuffle(&mut windows, &mut shuffle_rng);
        for chunk in windows.chunks(cfg.batch) {
            let b = chunk.len();
            let lr = lr_at(step as usize, total_steps, cfg.lr, cfg.warmup_ratio);

            let mut images: Vec<&[f32]> = Vec::with_capacity(b * t_hist);
            let mut states: Vec<f32> = Vec::with_capacity(b * t_hist * j);
            let mut a0: Vec<f32> = Vec::with_capacity(b * n_hor * j);
            for &(e, t) in chunk {
                let w = gather_window(data, &stats, e as usize, t as usize, t_hist, n_hor);
                images.extend(w.images);
                states.extend(w.states);
                a0.extend(w.actions);
            }
            let patches = model.patch_batch::<f32>(&images)?;

            let mut tape = Tape::<f32>::new();
            let mut gp = GraphParams::new(&params);
            let pl = tape.leaf(patches, vec![b * t_hist, p, d])?;
            let st = tape.leaf(states, vec![b * t_hist, j])?;
            let (h_sc, _) = model.encode(&mut tape, &mut gp, pl, st, b)?;
            let batch = draw_diffusion_batch(&sched, &a0, b, n_hor, j, &mut diff_rng);
            let loss = model
                .diffusion_loss(&mut tape, &mut gp, h_sc, &batch)
                .map_err(|e| Error::Format(format!("step {step} (windows {chunk:?}): {e}")))?;
            let loss_val = tape.scalar_value(loss) as f64;
            if !loss_val.is_finite() {
                return Err(Error::Format(format!("non-finite loss at step {step} (windows {chunk:?})")));
            }
            tape.backward(loss)?;
            let mut grads = gp.grads(&tape);
            drop(tape);
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam_step(&mut params, &grads, &mut adam, lr, cfg);
            ema_update(&mut ema, &params, ema_decay(adam.t, cfg.ema_inv_gamma, cfg.ema_power, cfg.ema_max_decay));

            step += 1;
            last_loss = loss_val;
            let row = MetricsRow { step, epoch, lr, loss: loss_val, wall_ms: t0.elapsed().as_millis() as u64 };
            serde_json::to_writer(&mut metrics, &row).map_err(|e| Error::Format(format!("metrics: {e}")))?;
            use std::io::Write;
            metrics.write_all(b"\n").map_err(|e| Error::io("metrics", e))?;
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            let snap = Checkpoint {
                config: cfg.clone(),
                step,
                params: params.clone_values(),
                ema: ema.clone_values(),
                stats: stats.clone(),
            };
            ckpt::save(&snap, &out_dir.join(format!("epoch{:03}.ckpt", epoch + 1)))?;
        }
    }
    use std::io::Write;
    metrics.flush().map_err(|e| Error::io("metrics", e))?;

    let param_count = params.value_count();
    let checkpoint_path = out_dir.join("final.ckpt");
    let final_ckpt = Checkpoint { config: cfg.clone(), step, params, ema, stats };
    ckpt::save(&final_ckpt, &checkpoint_path)?;
    Ok(TrainOutput { checkpoint_path, metrics_path, final_loss: last_loss, steps: step, param_count })
}

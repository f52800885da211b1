//! Closed-loop evaluation: receding-horizon rollouts, per-grid-cell
//! reports with mean plus/minus std over repeat batches, and the four
//! visual-robustness suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::ckpt::Checkpoint;
use crate::data::NormStats;
use crate::env::{self, Lighting, RobustnessConfig, ToyEnv, GRID_CELLS, JOINTS};
use crate::error::{Error, Result};
use crate::model::VodpModel;
use crate::nn::{GraphParams, ParamStore};
use crate::policy::Scheduler;
use crate::tensor::Tape;

/// A trained policy ready for rollouts (EMA weights).
pub struct Policy {
    pub model: VodpModel,
    pub weights: ParamStore<f32>,
    pub stats: NormStats,
    pub sched: Scheduler,
}

impl Policy {
    /// Loads the EMA weights from a checkpoint; evaluation always runs on
    /// the shadow parameters.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Policy> {
        let model = ckpt.model()?;
        let sched = model.scheduler()?;
        Ok(Policy { model, weights: ckpt.ema, stats: ckpt.stats, sched })
    }

    /// One observation -> one denormalized action chunk.
    pub fn plan(&self, images: &[&[f32]], states_raw: &[f32], rng: &mut ChaCha8Rng) -> Result<Vec<[f32; JOINTS]>> {
        let cfg = &self.model.cfg;
        let t = cfg.history;
        if images.len() != t || states_raw.len() != t * cfg.joints {
            return Err(Error::ShapeMismatch {
                op: "plan",
                lhs: vec![images.len(), states_raw.len()],
                rhs: vec![t, t * cfg.joints],
            });
        }
        let mut states = states_raw.to_vec();
        self.stats.norm_state(&mut states);
        let patches = self.model.patch_batch::<f32>(images)?;
        let p = cfg.patch_cfg().p();
        let d = cfg.patch_cfg().patch_dim();

        let mut tape = Tape::<f32>::new();
        let mut gp = GraphParams::frozen(&self.weights);
        let pl = tape.leaf(patches, vec![t, p, d])?;
        let st = tape.leaf(states, vec![t, cfg.joints])?;
        let (h_sc, _) = self.model.encode(&mut tape, &mut gp, pl, st, 1)?;
        let mut chunk = self.model.sample_chunk(&mut tape, &mut gp, &self.sched, h_sc, rng)?;
        self.stats.denorm_action(&mut chunk);
        Ok(chunk
            .chunks(cfg.joints)
            .map(|c| {
                let mut a = [0.0; JOINTS];
                a.copy_from_slice(c);
                a
            })
            .collect())
    }
}

/// What drives the environment during a rollout: the learned policy or the
/// scripted expert (the harness self-test).
pub enum Planner<'a> {
    Learned(&'a Policy),
    Expert,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub cell: usize,
    pub success: bool,
    pub steps: u32,
    pub fault: bool,
}

/// Runs one episode closed loop: sample a chunk, execute `exec_horizon`
/// actions, re-observe. Observation histories repeat the first frame at
/// episode start.
pub fn rollout(
    planner: &Planner,
    env_seed: u64,
    robustness: RobustnessConfig,
    sample_seed: u64,
    exec_horizon: usize,
) -> Result<EpisodeResult> {
    let mut env = ToyEnv::reset(env_seed, robustness);
    let cell = env::grid_cell(env_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    rng.set_stream(3);

    match planner {
        Planner::Expert => loop {
            let a = env.expert_action();
            let out = env.step(&a);
            if out.done {
                return Ok(EpisodeResult { seed: env_seed, cell, success: out.success, steps: env.state.step_count, fault: out.fault });
            }
        },
        Planner::Learned(policy) => {
            let t = policy.model.cfg.history;
            let exec = exec_horizon.clamp(1, policy.model.cfg.horizon);
            let mut frames: Vec<Vec<f32>> = Vec::new();
            let mut states: Vec<[f32; JOINTS]> = Vec::new();
            loop {
                frames.push(env.render());
                states.push(env.state_vec());
                let take = |i: usize| frames.len().saturating_sub(t - i).min(frames.len() - 1);
                let imgs: Vec<&[f32]> = (0..t).map(|i| frames[take(i)].as_slice()).collect();
                let mut st = Vec::with_capacity(t * JOINTS);
                for i in 0..t {
                    st.extend_from_slice(&states[take(i)]);
                }
                let chunk = policy.plan(&imgs, &st, &mut rng)?;
                for a in chunk.iter().take(exec) {
                    let out = env.step(a);
                    if out.done {
                        return Ok(EpisodeResult {
                            seed: env_seed,
                            cell,
                            success: out.success,
                            steps: env.state.step_count,
                            fault: out.fault,
                        });
                    }
                    frames.push(env.render());
                    states.push(env.state_vec());
                }
                // keep the history buffers bounded
                if frames.len() > t {
                    frames.drain(..frames.len() - t);
                    states.drain(..states.len() - t);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CellOutcome {
    pub successes: u32,
    pub trials: u32,
}

/// One evaluation condition: success rate per repeat batch, mean plus/minus
/// std across repeats, and the per-grid-cell outcome matrix.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub condition: String,
    pub episodes: usize,
    pub repeats: usize,
    pub seed_base: u64,
    pub exec_horizon: usize,
    pub repeat_rates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub total_successes: u32,
    pub total_episodes: u32,
    pub cells: Vec<CellOutcome>,
}

impl EvalReport {
    fn from_episodes(
        condition: &str,
        episodes: usize,
        repeats: usize,
        seed_base: u64,
        exec_horizon: usize,
        results: &[EpisodeResult],
    ) -> EvalReport {
        let mut repeat_rates = Vec::with_capacity(repeats);
        let mut cells = vec![CellOutcome { successes: 0, trials: 0 }; GRID_CELLS];
        for r in 0..repeats {
            let batch = &results[r * episodes..(r + 1) * episodes];
            let succ = batch.iter().filter(|e| e.success).count();
            repeat_rates.push(100.0 * succ as f64 / episodes as f64);
            for e in batch {
                cells[e.cell].trials += 1;
                if e.success {
                    cells[e.cell].successes += 1;
                }
            }
        }
        let mean = repeat_rates.iter().sum::<f64>() / repeats as f64;
        let var = repeat_rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / repeats as f64;
        let total_successes = results.iter().filter(|e| e.success).count() as u32;
        EvalReport {
            condition: condition.to_string(),
            episodes,
            repeats,
            seed_base,
            exec_horizon,
            repeat_rates,
            mean,
            std: var.sqrt(),
            total_successes,
            total_episodes: results.len() as u32,
            cells,
        }
    }

    /// Success grid, one line per row, cells as `s/n` (dash when unvisited).
    pub fn grid_text(&self) -> String {
        let mut out = String::new();
        for row in 0..4 {
            for col in 0..4 {
                let c = &self.cells[row * 4 + col];
                if c.trials == 0 {
                    out.push_str("  -  ");
                } else {
                    out.push_str(&format!(" {}/{} ", c.successes, c.trials));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{:<16} {:>5.1} ± {:<5.1}  ({}/{} episodes, repeats: {})",
            self.condition,
            self.mean,
            self.std,
            self.total_successes,
            self.total_episodes,
            self.repeat_rates.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>().join("/"),
        )
    }
}

/// Evaluates one condition over `episodes x repeats` rollouts. Episodes run
/// in parallel with independent rng streams; results are order-stable.
pub fn evaluate(
    planner: &Planner,
    condition: &str,
    episodes: usize,
    repeats: usize,
    seed_base: u64,
    robustness: RobustnessConfig,
    exec_horizon: usize,
) -> Result<EvalReport> {
    let total = episodes * repeats;
    let results: Vec<Result<EpisodeResult>> = match planner {
        // the learned policy is Sync; parallelize across episodes
        Planner::Learned(_) => (0..total)
            .into_par_iter()
            .map(|i| {
                let seed = seed_base + i as u64;
                rollout(planner, seed, robustness, seed, exec_horizon)
            })
            .collect(),
        Planner::Expert => (0..total)
            .map(|i| {
                let seed = seed_base + i as u64;
                rollout(planner, seed, robustness, seed, exec_horizon)
            })
            .collect(),
    };
    let mut flat = Vec::with_capacity(total);
    for r in results {
        flat.push(r?);
    }
    Ok(EvalReport::from_episodes(condition, episodes, repeats, seed_base, exec_horizon, &flat))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Size,
    Appearance,
    Illumination,
    Background,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size" => Ok(Suite::Size),
            "appearance" => Ok(Suite::Appearance),
            "illumination" => Ok(Suite::Illumination),
            "background" => Ok(Suite::Background),
            other => Err(Error::Config(format!(
                "unknown suite '{other}' (size|appearance|illumination|background)"
            ))),
        }
    }
}

/// The per-suite conditions: exactly one visual factor varies per suite.
pub fn suite_conditions(kind: Suite) -> Vec<(String, RobustnessConfig)> {
    let base = RobustnessConfig::default();
    match kind {
        Suite::Size => [0.7, 1.0, 1.6]
            .iter()
            .map(|&s| (format!("size {s:.1}x"), RobustnessConfig { size_scale: s, ..base }))
            .collect(),
        Suite::Appearance => ["orange", "blue", "green", "yellow"]
            .iter()
            .map(|&c| {
                (format!("cube {c}"), RobustnessConfig { cube_color: env::cube_color(c).unwrap(), ..base })
            })
            .collect(),
        Suite::Illumination => [Lighting::Normal, Lighting::Switch, Lighting::Blink]
            .iter()
            .map(|&l| (format!("light {l:?}").to_lowercase(), RobustnessConfig { lighting: l, ..base }))
            .collect(),
        Suite::Background => ["table", "white", "pink", "blue"]
            .iter()
            .map(|&b| {
                (format!("bg {b}"), RobustnessConfig { background: env::background_color(b).unwrap(), ..base })
            })
            .collect(),
    }
}

/// Runs every condition of one robustness suite (20 fixed evaluation
/// positions per repeat).
pub fn run_suite(
    planner: &Planner,
    kind: Suite,
    episodes: usize,
    repeats: usize,
    seed_base: u64,
    exec_horizon: usize,
) -> Result<Vec<EvalReport>> {
    suite_conditions(kind)
        .into_iter()
        .map(|(name, rc)| evaluate(planner, &name, episodes, repeats, seed_base, rc, exec_horizon))
        .collect()
}

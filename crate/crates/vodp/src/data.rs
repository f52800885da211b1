//! Demonstration dataset: binary file format, window extraction, and
//! normalization statistics.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "VODP"
//! version u32      1
//! episodes u32
//! j        u32     action/state width
//! h, w     u32     image extents
//! t_flag   u32     1 = frames stored frame-aligned, history reconstructable
//! then per episode:
//!   len    u32     frame count L
//!   L frames of { image: h*w*3 f32, state: j f32, action: j f32 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::env::{self, RobustnessConfig, ToyEnv};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VODP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Frame {
    pub image: Vec<f32>,
    pub state: Vec<f32>,
    pub action: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone)]
pub struct DemoSet {
    pub j: usize,
    pub h: usize,
    pub w: usize,
    pub episodes: Vec<Episode>,
}

impl DemoSet {
    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }
}

/// Rolls the scripted expert for `count` episodes starting at `seed0` and
/// records frame-aligned (image, state, action) triples. Every episode must
/// end in success; a failing expert is a bug worth surfacing loudly.
pub fn collect_demos(count: usize, seed0: u64, robustness: RobustnessConfig) -> Result<DemoSet> {
    let mut episodes = Vec::with_capacity(count);
    for i in 0..count {
        let seed = seed0 + i as u64;
        let mut env = ToyEnv::reset(seed, robustness);
        let mut frames = Vec::new();
        loop {
            let image = env.render();
            let state = env.state_vec().to_vec();
            let action = env.expert_action();
            let out = env.step(&action);
            frames.push(Frame { image, state, action: action.to_vec() });
            if out.done {
                if !out.success {
                    return Err(Error::Format(format!("expert failed to complete episode for seed {seed}")));
                }
                break;
            }
        }
        episodes.push(Episode { frames });
    }
    Ok(DemoSet { j: env::JOINTS, h: env::RES, w: env::RES, episodes })
}

pub fn write_demos(set: &DemoSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let ctx = || format!("writing {}", path.display());
    let put_u32 = |w: &mut BufWriter<File>, v: u32| w.write_all(&v.to_le_bytes());
    w.write_all(MAGIC).map_err(|e| Error::io(ctx(), e))?;
    for v in [VERSION, set.episodes.len() as u32, set.j as u32, set.h as u32, set.w as u32, 1] {
        put_u32(&mut w, v).map_err(|e| Error::io(ctx(), e))?;
    }
    let mut buf = Vec::new();
    for ep in &set.episodes {
        put_u32(&mut w, ep.frames.len() as u32).map_err(|e| Error::io(ctx(), e))?;
        for f in &ep.frames {
            buf.clear();
            for &v in f.image.iter().chain(&f.state).chain(&f.action) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

pub fn read_demos(path: &Path) -> Result<DemoSet> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let ctx = || format!("reading {}", path.display());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic {magic:?}", path.display())));
    }
    let get_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| Error::io(ctx(), e))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let episodes = get_u32(&mut r)? as usize;
    let j = get_u32(&mut r)? as usize;
    let h = get_u32(&mut r)? as usize;
    let w = get_u32(&mut r)? as usize;
    let _t_flag = get_u32(&mut r)?;

    let img_len = h * w * 3;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let len = get_u32(&mut r)? as usize;
        let mut frames = Vec::with_capacity(len);
        let mut raw = vec![0u8; (img_len + 2 * j) * 4];
        for _ in 0..len {
            r.read_exact(&mut raw).map_err(|e| Error::io(ctx(), e))?;
            let floats: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            frames.push(Frame {
                image: floats[..img_len].to_vec(),
                state: floats[img_len..img_len + j].to_vec(),
                action: floats[img_len + j..].to_vec(),
            });
        }
        out.push(Episode { frames });
    }
    Ok(DemoSet { j, h, w, episodes: out })
}

/// FNV-1a over the raw file bytes; stable fingerprint for determinism checks.
pub fn file_checksum(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

/// Per-dimension min/max used to map states and actions into [-1, 1].
/// Stored in checkpoints so evaluation matches training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub action_min: Vec<f32>,
    pub action_max: Vec<f32>,
    pub state_min: Vec<f32>,
    pub state_max: Vec<f32>,
}

impl NormStats {
    pub fn from_demos(set: &DemoSet) -> NormStats {
        let j = set.j;
        let mut stats = NormStats {
            action_min: vec![f32::INFINITY; j],
            action_max: vec![f32::NEG_INFINITY; j],
            state_min: vec![f32::INFINITY; j],
            state_max: vec![f32::NEG_INFINITY; j],
        };
        for ep in &set.episodes {
            for f in &ep.frames {
                for d in 0..j {
                    stats.action_min[d] = stats.action_min[d].min(f.action[d]);
                    stats.action_max[d] = stats.action_max[d].max(f.action[d]);
                    stats.state_min[d] = stats.state_min[d].min(f.state[d]);
                    stats.state_max[d] = stats.state_max[d].max(f.state[d]);
                }
            }
        }
        stats
    }

    pub fn norm_action(&self, a: &mut [f32]) {
        norm(a, &self.action_min, &self.action_max);
    }

    pub fn denorm_action(&self, a: &mut [f32]) {
        for (i, v) in a.iter_mut().enumerate() {
            let (lo, hi) = (self.action_min[i % self.action_min.len()], self.action_max[i % self.action_max.len()]);
            *v = if hi > lo { (*v + 1.0) / 2.0 * (hi - lo) + lo } else { lo };
        }
    }

    pub fn norm_state(&self, s: &mut [f32]) {
        norm(s, &self.state_min, &self.state_max);
    }
}

fn norm(x: &mut [f32], lo: &[f32], hi: &[f32]) {
    let j = lo.len();
    for (i, v) in x.iter_mut().enumerate() {
        let (l, h) = (lo[i % j], hi[i % j]);
        *v = if h > l { 2.0 * (*v - l) / (h - l) - 1.0 } else { 0.0 };
    }
}

/// Every valid (episode, offset) pair; one window per frame.
pub fn window_index(set: &DemoSet) -> Vec<(u32, u32)> {
    let mut idx = Vec::with_capacity(set.frame_count());
    for (e, ep) in set.episodes.iter().enumerate() {
        for t in 0..ep.frames.len() {
            idx.push((e as u32, t as u32));
        }
    }
    idx
}

/// Materializes one training window: an observation history of `t_hist`
/// frames ending at the offset (padded at episode start by repeating the
/// first frame) and an action horizon of `n_horizon` steps from the offset
/// (padded at episode end by repeating the last action). States and actions
/// come out normalized; images stay raw [0, 1].
pub struct Window<'a> {
    pub images: Vec<&'a [f32]>,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
}

pub fn gather_window<'a>(
    set: &'a DemoSet,
    stats: &NormStats,
    episode: usize,
    offset: usize,
    t_hist: usize,
    n_horizon: usize,
) -> Window<'a> {
    let frames = &set.episodes[episode].frames;
    let mut images = Vec::with_capacity(t_hist);
    let mut states = Vec::with_capacity(t_hist * set.j);
    for i in 0..t_hist {
        let t = (offset + i + 1).saturating_sub(t_hist).min(frames.len() - 1);
        images.push(frames[t].image.as_slice());
        states.extend_from_slice(&frames[t].state);
    }
    stats.norm_state(&mut states);
    let mut actions = Vec::with_capacity(n_horizon * set.j);
    for i in 0..n_horizon {
        let t = (offset + i).min(frames.len() - 1);
        actions.extend_from_slice(&frames[t].action);
    }
    stats.norm_action(&mut actions);
    Window { images, states, actions }
}

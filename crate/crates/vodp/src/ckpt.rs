//! Checkpoint file: versioned header, embedded config text, step counter,
//! and named f32 weight sections (raw, EMA shadow, normalization stats),
//! little-endian throughout. Loading rebuilds the model layout from the
//! embedded config and fills every parameter by name.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::VodpModel;
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"VODPCKPT";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub stats: NormStats,
}

impl Checkpoint {
    /// Rebuilds the model whose weights this checkpoint stores.
    pub fn model(&self) -> Result<VodpModel> {
        let (model, _) = VodpModel::build::<f32>(self.config.model, self.config.seed)?;
        Ok(model)
    }
}

fn write_section(w: &mut BufWriter<File>, name: &str, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let ctx = || format!("writing {}", path.display());
    let io = |e| Error::io(ctx(), e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let cfg_text = ckpt.config.to_text();
    w.write_all(&(cfg_text.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg_text.as_bytes()).map_err(io)?;
    w.write_all(&ckpt.step.to_le_bytes()).map_err(io)?;

    let stats = &ckpt.stats;
    let sections = ckpt.params.len() * 2 + 4;
    w.write_all(&(sections as u32).to_le_bytes()).map_err(io)?;
    for (name, shape, data) in ckpt.params.iter() {
        write_section(&mut w, &format!("param.{name}"), shape, data).map_err(io)?;
    }
    for (name, shape, data) in ckpt.ema.iter() {
        write_section(&mut w, &format!("ema.{name}"), shape, data).map_err(io)?;
    }
    let j = stats.action_min.len();
    write_section(&mut w, "stats.action_min", &[j], &stats.action_min).map_err(io)?;
    write_section(&mut w, "stats.action_max", &[j], &stats.action_max).map_err(io)?;
    write_section(&mut w, "stats.state_min", &[j], &stats.state_min).map_err(io)?;
    write_section(&mut w, "stats.state_max", &[j], &stats.state_max).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let ctx = || format!("reading {}", path.display());

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(ctx(), e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported checkpoint version {version}", path.display())));
    }
    r.read_exact(&mut u32buf).map_err(|e| Error::io(ctx(), e))?;
    let cfg_len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(|e| Error::io(ctx(), e))?;
    let config = TrainConfig::parse(
        std::str::from_utf8(&cfg_bytes).map_err(|_| Error::Format("config text not utf-8".into()))?,
    )?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|e| Error::io(ctx(), e))?;
    let step = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u32buf).map_err(|e| Error::io(ctx(), e))?;
    let sections = u32::from_le_bytes(u32buf) as usize;

    let mut named: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(sections);
    for _ in 0..sections {
        r.read_exact(&mut u32buf).map_err(|e| Error::io(ctx(), e))?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::io(ctx(), e))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("section name not utf-8".into()))?;
        r.read_exact(&mut u32buf).map_err(|e| Error::io(ctx(), e))?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u32buf).map_err(|e| Error::io(ctx(), e))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|e| Error::io(ctx(), e))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        named.push((name, shape, data));
    }

    // rebuild the layout, then overwrite values by name
    let (model, mut params) = VodpModel::build::<f32>(config.model, config.seed)?;
    let mut ema = params.clone_values();
    let _ = model;
    let fill = |store: &mut ParamStore<f32>, prefix: &str| -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let want = format!("{prefix}.{}", store.name(id));
            let found = named
                .iter()
                .find(|(n, _, _)| *n == want)
                .ok_or_else(|| Error::Format(format!("checkpoint missing section '{want}'")))?;
            store.set_data(id, found.2.clone())?;
        }
        Ok(())
    };
    fill(&mut params, "param")?;
    fill(&mut ema, "ema")?;

    let grab = |name: &str| -> Result<Vec<f32>> {
        named
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d.clone())
            .ok_or_else(|| Error::Format(format!("checkpoint missing section '{name}'")))
    };
    let stats = NormStats {
        action_min: grab("stats.action_min")?,
        action_max: grab("stats.action_max")?,
        state_min: grab("stats.state_min")?,
        state_max: grab("stats.state_max")?,
    };
    Ok(Checkpoint { config, step, params, ema, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn save_load_roundtrip_bitwise() {
        let cfg = TrainConfig {
            model: ModelConfig {
                image: 32,
                patch: 8,
                channels: 16,
                heads: 4,
                horizon: 4,
                c_prime: 8,
                noise_width: 8,
                k_embed_dim: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, params) = VodpModel::build::<f32>(cfg.model, cfg.seed).unwrap();
        let ema = params.clone_values();
        let stats = NormStats {
            action_min: vec![-0.05, -0.05, 0.0],
            action_max: vec![0.05, 0.05, 1.0],
            state_min: vec![0.0; 3],
            state_max: vec![1.0; 3],
        };
        let ckpt = Checkpoint { config: cfg, step: 1234, params, ema, stats };
        let dir = std::env::temp_dir().join("vodp-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        save(&ckpt, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.step, 1234);
        assert_eq!(back.config, ckpt.config);
        for (a, b) in ckpt.params.iter().zip(back.params.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.2, b.2, "param {} not bit-identical", a.0);
        }
        assert_eq!(back.stats, ckpt.stats);

        // byte-stable on disk
        let bytes1 = std::fs::read(&path).unwrap();
        save(&back, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }
}

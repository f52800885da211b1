//! Flat key=value training configuration.
//!
//! One `key=value` per line, `#` comments. Unknown keys are errors that
//! name the key. The same text form is embedded in checkpoints so a saved
//! run is fully reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuser::{Downsample, Modality};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub ema_inv_gamma: f64,
    pub ema_power: f64,
    pub ema_max_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Extra checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            epochs: 50,
            lr: 1e-4,
            warmup_ratio: 0.05,
            beta1: 0.95,
            beta2: 0.99,
            weight_decay: 1e-6,
            adam_eps: 1e-8,
            ema_inv_gamma: 1.0,
            ema_power: 0.75,
            ema_max_decay: 0.9999,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if self.model.history != 1 && self.model.history != 3 {
            return Err(Error::Config(format!("history {} must be 1 or 3", self.model.history)));
        }
        self.model.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>().map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
        }
        match key {
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "warmup_ratio" => self.warmup_ratio = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "ema_inv_gamma" => self.ema_inv_gamma = num(key, value)?,
            "ema_power" => self.ema_power = num(key, value)?,
            "ema_max_decay" => self.ema_max_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "image" => self.model.image = num(key, value)?,
            "patch" => self.model.patch = num(key, value)?,
            "channels" => self.model.channels = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "aa_blocks" => self.model.aa_blocks = num(key, value)?,
            "history" => self.model.history = num(key, value)?,
            "horizon" => self.model.horizon = num(key, value)?,
            "joints" => self.model.joints = num(key, value)?,
            "c_prime" => self.model.c_prime = num(key, value)?,
            "modality" => self.model.modality = value.parse::<Modality>()?,
            "downsample" => self.model.downsample = value.parse::<Downsample>()?,
            "k_steps" => self.model.k_steps = num(key, value)?,
            "noise_width" => self.model.noise_width = num(key, value)?,
            "k_embed_dim" => self.model.k_embed_dim = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", ln + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        format!(
            "batch={}\nepochs={}\nlr={}\nwarmup_ratio={}\nbeta1={}\nbeta2={}\nweight_decay={}\nadam_eps={}\n\
             ema_inv_gamma={}\nema_power={}\nema_max_decay={}\ngrad_clip={}\nseed={}\ncheckpoint_every={}\n\
             image={}\npatch={}\nchannels={}\nheads={}\naa_blocks={}\nhistory={}\nhorizon={}\njoints={}\n\
             c_prime={}\nmodality={}\ndownsample={}\nk_steps={}\nnoise_width={}\nk_embed_dim={}\n",
            self.batch,
            self.epochs,
            self.lr,
            self.warmup_ratio,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.adam_eps,
            self.ema_inv_gamma,
            self.ema_power,
            self.ema_max_decay,
            self.grad_clip,
            self.seed,
            self.checkpoint_every,
            m.image,
            m.patch,
            m.channels,
            m.heads,
            m.aa_blocks,
            m.history,
            m.horizon,
            m.joints,
            m.c_prime,
            m.modality,
            m.downsample,
            m.k_steps,
            m.noise_width,
            m.k_embed_dim,
        )
    }
}

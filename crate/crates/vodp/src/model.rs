//! The full policy: encoder -> fuser -> compressor -> diffusion head, bound
//! to one parameter store with a deterministic registration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{self, CompressorParams};
use crate::encoder::{self, EncoderParams, PatchConfig};
use crate::error::Result;
use crate::fuser::{self, Downsample, FuserParams, Modality};
use crate::nn::{GraphParams, ParamStore};
use crate::policy::{self, DiffusionBatch, NoiseNet, Scheduler};
use crate::tensor::{Scalar, Tape, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: usize,
    pub patch: usize,
    pub channels: usize,
    pub heads: usize,
    pub aa_blocks: usize,
    pub history: usize,
    pub horizon: usize,
    pub joints: usize,
    pub c_prime: usize,
    pub modality: Modality,
    pub downsample: Downsample,
    pub k_steps: usize,
    pub noise_width: usize,
    pub k_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: 64,
            patch: 8,
            channels: 64,
            heads: 4,
            aa_blocks: 2,
            history: 1,
            horizon: 8,
            joints: 3,
            c_prime: 64,
            modality: Modality::Full,
            downsample: Downsample::Pool,
            k_steps: 100,
            noise_width: 64,
            k_embed_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn patch_cfg(&self) -> PatchConfig {
        PatchConfig {
            image_h: self.image,
            image_w: self.image,
            patch: self.patch,
            c: self.channels,
            heads: self.heads,
            aa_blocks: self.aa_blocks,
        }
    }

    /// Flattened scene-feature width fed to the diffusion head.
    pub fn scene_dim(&self) -> usize {
        self.history * (self.c_prime + self.joints)
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_cfg().validate()?;
        if self.history == 0 || self.horizon % 4 != 0 {
            return Err(crate::Error::Config(format!(
                "history {} must be >= 1 and horizon {} divisible by 4",
                self.history, self.horizon
            )));
        }
        Ok(())
    }
}

pub struct VodpModel {
    pub cfg: ModelConfig,
    pub enc: EncoderParams,
    pub fus: FuserParams,
    pub comp: CompressorParams,
    pub net: NoiseNet,
}

/// Attention probability tensors recorded during one forward pass.
pub struct Probes {
    pub encoder: Vec<ValueId>,
    pub fuser: Option<ValueId>,
}

impl VodpModel {
    /// Registers all weights in a fixed order from the seed's init stream.
    pub fn build<S: Scalar>(cfg: ModelConfig, seed: u64) -> Result<(VodpModel, ParamStore<S>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = cfg.patch_cfg();
        let enc = EncoderParams::register(&mut store, &pc, cfg.history, &mut rng);
        let fus = FuserParams::register(&mut store, cfg.channels, cfg.heads, cfg.modality, cfg.downsample, &mut rng);
        let comp = CompressorParams::register(&mut store, cfg.channels, cfg.c_prime, &mut rng);
        let cond_dim = cfg.scene_dim() + cfg.k_embed_dim;
        let net = NoiseNet::register(&mut store, cfg.joints, cfg.noise_width, cond_dim, &mut rng);
        Ok((VodpModel { cfg, enc, fus, comp, net }, store))
    }

    pub fn scheduler(&self) -> Result<Scheduler> {
        policy::make_scheduler(self.cfg.k_steps)
    }

    /// Centers [0, 1] images to [-1, 1] and flattens them into patch rows
    /// for a batch of observation histories.
    pub fn patch_batch<S: Scalar>(&self, images: &[&[f32]]) -> Result<Vec<S>> {
        let pc = self.cfg.patch_cfg();
        let px = self.cfg.image * self.cfg.image * 3;
        let mut centered: Vec<S> = Vec::with_capacity(images.len() * px);
        for img in images {
            debug_assert_eq!(img.len(), px);
            centered.extend(img.iter().map(|&v| S::from_f64(v as f64 * 2.0 - 1.0)));
        }
        encoder::patchify(&centered, images.len(), &pc)
    }

    /// Full visual pipeline: patch rows (B*T, P, D) and normalized states
    /// (B*T, J) to the flattened per-sample scene feature (B, T*(C'+J)).
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        gp: &mut GraphParams<S>,
        patches: ValueId,
        states: ValueId,
        batch: usize,
    ) -> Result<(ValueId, Probes)> {
        let t = self.cfg.history;
        let mut probes = Vec::new();
        let sem = encoder::semantic_encode(tape, gp, &self.enc, patches, &mut probes)?;
        let geo = encoder::geometric_encode(tape, gp, &self.enc, sem, batch, t, None, &mut probes)?;
        let fused = fuser::fuse_all(tape, gp, &self.fus, geo.geo, sem)?;
        let grid = compressor::to_grid(tape, fused.fused, self.cfg.patch_cfg().grid())?;
        let pooled = compressor::residual_downsample(tape, gp, &self.comp, grid)?;
        let shape = tape.shape(pooled).to_vec();
        let sp = tape.reshape(pooled, vec![shape[0], shape[1]])?;
        let h_sc = compressor::scene_concat(tape, gp, &self.comp, sp, states)?;
        let flat = tape.reshape(h_sc, vec![batch, self.cfg.scene_dim()])?;
        Ok((flat, Probes { encoder: probes, fuser: fused.probs }))
    }

    pub fn diffusion_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        gp: &mut GraphParams<S>,
        h_sc_flat: ValueId,
        batch: &DiffusionBatch<S>,
    ) -> Result<ValueId> {
        policy::diffusion_loss(tape, gp, &self.net, h_sc_flat, batch, self.cfg.horizon, self.cfg.k_embed_dim)
    }

    /// Samples one normalized action chunk for a single observation.
    pub fn sample_chunk<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        gp: &mut GraphParams<S>,
        sched: &Scheduler,
        h_sc_flat: ValueId,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<S>> {
        policy::sample_chunk(tape, gp, &self.net, sched, h_sc_flat, self.cfg.horizon, self.cfg.k_embed_dim, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image: 32,
            patch: 8,
            channels: 16,
            heads: 4,
            aa_blocks: 2,
            history: 1,
            horizon: 4,
            joints: 3,
            c_prime: 16,
            noise_width: 16,
            k_embed_dim: 8,
            k_steps: 10,
            ..Default::default()
        }
    }

    #[test]
    fn shape_chain_end_to_end() {
        let cfg = tiny_cfg();
        let (model, store) = VodpModel::build::<f64>(cfg, 0).unwrap();
        let mut tape = Tape::new();
        let mut gp = GraphParams::new(&store);
        let b = 2;
        let t = cfg.history;
        let img = vec![0.5f32; cfg.image * cfg.image * 3];
        let imgs: Vec<&[f32]> = (0..b * t).map(|_| img.as_slice()).collect();
        let patches = model.patch_batch::<f64>(&imgs).unwrap();
        let p = cfg.patch_cfg().p();
        let d = cfg.patch_cfg().patch_dim();
        let pl = tape.leaf(patches, vec![b * t, p, d]).unwrap();
        let st = tape.leaf(vec![0.1; b * t * 3], vec![b * t, 3]).unwrap();
        let (h_sc, probes) = model.encode(&mut tape, &mut gp, pl, st, b).unwrap();
        assert_eq!(tape.shape(h_sc), &[b, cfg.scene_dim()]);
        assert!(!probes.encoder.is_empty());
        assert!(probes.fuser.is_some());
    }

    #[test]
    fn count_changes_with_modality() {
        let full = VodpModel::build::<f32>(tiny_cfg(), 0).unwrap().1.value_count();
        let no_sem = VodpModel::build::<f32>(ModelConfig { modality: Modality::NoSem, ..tiny_cfg() }, 0)
            .unwrap()
            .1
            .value_count();
        let mlp = VodpModel::build::<f32>(ModelConfig { downsample: Downsample::Mlp, ..tiny_cfg() }, 0)
            .unwrap()
            .1
            .value_count();
        assert!(no_sem < full, "ablation must drop the cross-attention weights");
        assert!(mlp > full, "mlp downsampling adds the 2C->C projection");
    }

    #[test]
    fn deterministic_build() {
        let (_, s1) = VodpModel::build::<f32>(tiny_cfg(), 42).unwrap();
        let (_, s2) = VodpModel::build::<f32>(tiny_cfg(), 42).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.2, b.2);
        }
    }
}

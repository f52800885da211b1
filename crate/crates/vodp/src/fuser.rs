//! Semantic-geometric fusion: per-frame residual cross-attention where the
//! downsampled geometric tokens query the semantic tokens, followed by a
//! residual FFN. No normalization layers — the fusion equations are applied
//! literally. Modality switches implement the feature ablations; the FFN is
//! kept in the ablated paths so parameter counts stay comparable.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, GraphParams, Init, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::{Scalar, Tape, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Full,
    NoGeo,
    NoSem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    Pool,
    Mlp,
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Modality::Full),
            "no_geo" => Ok(Modality::NoGeo),
            "no_sem" => Ok(Modality::NoSem),
            other => Err(Error::Config(format!("unknown modality '{other}' (full|no_geo|no_sem)"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Full => "full",
            Modality::NoGeo => "no_geo",
            Modality::NoSem => "no_sem",
        })
    }
}

impl std::str::FromStr for Downsample {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(Downsample::Pool),
            "mlp" => Ok(Downsample::Mlp),
            other => Err(Error::Config(format!("unknown downsample '{other}' (pool|mlp)"))),
        }
    }
}

impl std::fmt::Display for Downsample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Downsample::Pool => "pool",
            Downsample::Mlp => "mlp",
        })
    }
}

/// Fusion weights. The cross-attention exists only in `Full` modality and
/// the 2C->C projection only in `Mlp` downsampling, so the parameter census
/// reflects the ablation.
pub struct FuserParams {
    pub attn: Option<MultiHeadAttention>,
    pub ffn: FeedForward,
    pub mlp_down: Option<Linear>,
    pub modality: Modality,
    pub downsample: Downsample,
    pub c: usize,
}

impl FuserParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        c: usize,
        heads: usize,
        modality: Modality,
        downsample: Downsample,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let attn = matches!(modality, Modality::Full)
            .then(|| MultiHeadAttention::register(store, "fuser.attn", c, heads, rng));
        let mlp_down = (matches!(downsample, Downsample::Mlp) && !matches!(modality, Modality::NoGeo))
            .then(|| Linear::register(store, "fuser.mlp_down", 2 * c, c, true, Init::Xavier, rng));
        let ffn = FeedForward::register(store, "fuser.ffn", c, rng);
        FuserParams { attn, ffn, mlp_down, modality, downsample, c }
    }
}

/// 2C -> C feature downsampling of geometric tokens: feature-axis average
/// pooling (kernel 2, stride 2) or the learned linear map.
pub fn downsample_geo<S: Scalar>(
    tape: &mut Tape<S>,
    gp: &mut GraphParams<S>,
    params: &FuserParams,
    g: ValueId,
) -> Result<ValueId> {
    let width = *tape.shape(g).last().unwrap();
    if width != 2 * params.c {
        return Err(Error::ShapeMismatch {
            op: "downsample_geo",
            lhs: tape.shape(g).to_vec(),
            rhs: vec![2 * params.c],
        });
    }
    match params.downsample {
        Downsample::Pool => tape.avg_pool_1d(g),
        Downsample::Mlp => {
            let lin = params.mlp_down.as_ref().expect("mlp downsample weights registered");
            lin.apply(tape, gp, g)
        }
    }
}

pub struct FuserOut {
    /// Fused tokens, always (frames, P, C) regardless of modality.
    pub fused: ValueId,
    /// Cross-attention weights (frames, heads, P, P) when present.
    pub probs: Option<ValueId>,
}

/// Fuses every frame: `geo` (F, P, 2C) and `sem` (F, P, C) with the frame
/// axis batched; frames never mix.
pub fn fuse_all<S: Scalar>(
    tape: &mut Tape<S>,
    gp: &mut GraphParams<S>,
    params: &FuserParams,
    geo: ValueId,
    sem: ValueId,
) -> Result<FuserOut> {
    let (gs, ss) = (tape.shape(geo).to_vec(), tape.shape(sem).to_vec());
    if gs[..2] != ss[..2] {
        return Err(Error::ShapeMismatch { op: "fuse_all", lhs: gs, rhs: ss });
    }
    match params.modality {
        Modality::Full => {
            if ss[2] != params.c {
                return Err(Error::ShapeMismatch { op: "fuse_all", lhs: ss, rhs: vec![params.c] });
            }
            let h_prime = downsample_geo(tape, gp, params, geo)?;
            let attn = params.attn.as_ref().expect("full modality has cross-attention");
            let att = attn.apply(tape, gp, h_prime, sem, None)?;
            let h_second = tape.add(h_prime, att.out)?;
            let f = params.ffn.apply(tape, gp, h_second)?;
            let fused = tape.add(h_second, f)?;
            Ok(FuserOut { fused, probs: Some(att.probs) })
        }
        Modality::NoGeo => {
            if ss[2] != params.c {
                return Err(Error::ShapeMismatch { op: "fuse_all", lhs: ss, rhs: vec![params.c] });
            }
            let f = params.ffn.apply(tape, gp, sem)?;
            let fused = tape.add(sem, f)?;
            Ok(FuserOut { fused, probs: None })
        }
        Modality::NoSem => {
            let h_prime = downsample_geo(tape, gp, params, geo)?;
            let f = params.ffn.apply(tape, gp, h_prime)?;
            let fused = tape.add(h_prime, f)?;
            Ok(FuserOut { fused, probs: None })
        }
    }
}

/// Single-frame fusion: `g` (P, 2C) with `s` (P, C) from the same frame.
pub fn fuse_frame<S: Scalar>(
    tape: &mut Tape<S>,
    gp: &mut GraphParams<S>,
    params: &FuserParams,
    g: ValueId,
    s: ValueId,
) -> Result<FuserOut> {
    let gs = tape.shape(g).to_vec();
    let ss = tape.shape(s).to_vec();
    let g1 = tape.reshape(g, vec![1, gs[0], gs[1]])?;
    let s1 = tape.reshape(s, vec![1, ss[0], ss[1]])?;
    let out = fuse_all(tape, gp, params, g1, s1)?;
    let os = tape.shape(out.fused).to_vec();
    let fused = tape.reshape(out.fused, vec![os[1], os[2]])?;
    Ok(FuserOut { fused, probs: out.probs })
}

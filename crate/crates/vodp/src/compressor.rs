//! Spatial compression: fused tokens are laid out on the patch grid,
//! downsampled by three stride-2 residual conv blocks, globally pooled, and
//! the projected feature is concatenated with the raw proprioceptive state.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GraphParams, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{Scalar, Tape, ValueId};

/// conv3x3 stride 2 + GELU + conv3x3 stride 1, with a strided 1x1 shortcut.
/// No normalization.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Conv2d,
}

impl ResBlock {
    fn register<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::register(store, &format!("{name}.conv1"), c, c, (3, 3), (2, 2), (1, 1), Init::He, rng),
            conv2: Conv2d::register(store, &format!("{name}.conv2"), c, c, (3, 3), (1, 1), (1, 1), Init::He, rng),
            shortcut: Conv2d::register(store, &format!("{name}.shortcut"), c, c, (1, 1), (2, 2), (0, 0), Init::He, rng),
        }
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, gp: &mut GraphParams<S>, x: ValueId) -> Result<ValueId> {
        let h = self.conv1.apply(tape, gp, x)?;
        let h = tape.gelu(h)?;
        let h = self.conv2.apply(tape, gp, h)?;
        let s = self.shortcut.apply(tape, gp, x)?;
        tape.add(h, s)
    }
}

pub struct CompressorParams {
    pub blocks: Vec<ResBlock>,
    /// Normalizes the pooled spatial feature; without it the scene feature
    /// magnitude drifts during training and drowns the conditioning signal.
    pub sp_norm: LayerNorm,
    /// C -> C' projection applied before the proprioceptive concat.
    pub proj: Linear,
    pub c: usize,
    pub c_prime: usize,
}

pub const RES_BLOCKS: usize = 3;

impl CompressorParams {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, c: usize, c_prime: usize, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..RES_BLOCKS)
            .map(|i| ResBlock::register(store, &format!("compressor.res{i}"), c, rng))
            .collect();
        let sp_norm = LayerNorm::register(store, "compressor.sp_norm", c, rng);
        let proj = Linear::register(store, "compressor.proj", c, c_prime, true, Init::Xavier, rng);
        CompressorParams { blocks, sp_norm, proj, c, c_prime }
    }
}

/// (frames, P, C) tokens -> (frames, C, H_P, W_P) channel-major grid, the
/// inverse of the row-major patch flattening.
pub fn to_grid<S: Scalar>(tape: &mut Tape<S>, tokens: ValueId, grid: (usize, usize)) -> Result<ValueId> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] != grid.0 * grid.1 {
        return Err(Error::Geometry {
            op: "to_grid",
            detail: format!("token shape {shape:?} does not match grid {grid:?}"),
        });
    }
    let (f, c) = (shape[0], shape[2]);
    let spread = tape.reshape(tokens, vec![f, grid.0, grid.1, c])?;
    tape.permute(spread, &[0, 3, 1, 2])
}

/// Three stride-2 residual blocks then global average pooling to (F, C, 1, 1).
pub fn residual_downsample<S: Scalar>(
    tape: &mut Tape<S>,
    gp: &mut GraphParams<S>,
    params: &CompressorParams,
    x: ValueId,
) -> Result<ValueId> {
    let mut h = x;
    for blk in &params.blocks {
        h = blk.apply(tape, gp, h)?;
    }
    tape.adaptive_avg_pool_2d(h)
}

/// h_sc rows: [GELU(proj(h_sp)), S] — proprioception is concatenated
/// untransformed, so its slice of the output is the input bit for bit.
pub fn scene_concat<S: Scalar>(
    tape: &mut Tape<S>,
    gp: &mut GraphParams<S>,
    params: &CompressorParams,
    h_sp: ValueId,
    states: ValueId,
) -> Result<ValueId> {
    let hs = tape.shape(h_sp).to_vec();
    let ss = tape.shape(states).to_vec();
    if hs[0] != ss[0] {
        return Err(Error::ShapeMismatch { op: "scene_concat", lhs: hs, rhs: ss });
    }
    let h = params.sp_norm.apply(tape, gp, h_sp)?;
    let h = params.proj.apply(tape, gp, h)?;
    let h = tape.gelu(h)?;
    tape.concat(&[h, states], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_layout_law_and_roundtrip() {
        let mut tape = Tape::<f64>::new();
        // tokens (1, 4, 2) on a 2x2 grid; token p carries value p
        let data = vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0];
        let tokens = tape.leaf(data.clone(), vec![1, 4, 2]).unwrap();
        let grid = to_grid(&mut tape, tokens, (2, 2)).unwrap();
        assert_eq!(tape.shape(grid), &[1, 2, 2, 2]);
        // channel 0 plane should be [[0,1],[2,3]] (token p at cell (p/2, p%2))
        assert_eq!(&tape.data(grid)[..4], &[0.0, 1.0, 2.0, 3.0]);

        // round trip back to tokens
        let back = tape.permute(grid, &[0, 2, 3, 1]).unwrap();
        let back = tape.reshape(back, vec![1, 4, 2]).unwrap();
        assert_eq!(tape.data(back), &data[..]);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let tokens = tape.leaf(vec![0.0; 8], vec![1, 4, 2]).unwrap();
        assert!(to_grid(&mut tape, tokens, (2, 3)).is_err());
    }

    #[test]
    fn spatial_chain_8_to_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let params = CompressorParams::register(&mut store, 4, 4, &mut rng);
        let mut tape = Tape::new();
        let mut gp = GraphParams::new(&store);
        let x: Vec<f64> = (0..2 * 4 * 64).map(|i| (i % 11) as f64 * 0.09 - 0.4).collect();
        let xi = tape.leaf(x, vec![2, 4, 8, 8]).unwrap();
        let y = residual_downsample(&mut tape, &mut gp, &params, xi).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 1, 1]);
    }

    #[test]
    fn zero_weights_leave_shortcut_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let params = CompressorParams::register(&mut store, 2, 2, &mut rng);
        // zero the main convs of every block, identity the 1x1 shortcuts
        for blk in &params.blocks {
            store.data_mut(blk.conv1.w).fill(0.0);
            store.data_mut(blk.conv2.w).fill(0.0);
            let c = 2;
            let mut eye = vec![0.0; c * c];
            for i in 0..c {
                eye[i * c + i] = 1.0;
            }
            store.set_data(blk.shortcut.w, eye).unwrap();
        }
        let mut tape = Tape::new();
        let mut gp = GraphParams::new(&store);
        // constant input: strided identity shortcuts preserve the constant
        let xi = tape.leaf(vec![0.7; 2 * 64], vec![1, 2, 8, 8]).unwrap();
        let y = residual_downsample(&mut tape, &mut gp, &params, xi).unwrap();
        for &v in tape.data(y) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn proprioception_concat_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let params = CompressorParams::register(&mut store, 4, 5, &mut rng);
        let mut tape = Tape::new();
        let mut gp = GraphParams::new(&store);
        let h = tape.leaf(vec![0.3, -0.2, 0.9, 0.1, 0.5, 0.5, -0.5, 0.25], vec![2, 4]).unwrap();
        let s_data = vec![0.123456789_f64, -0.987654321, 0.5, 1.0, 0.0, -1.0];
        let s = tape.leaf(s_data.clone(), vec![2, 3]).unwrap();
        let out = scene_concat(&mut tape, &mut gp, &params, h, s).unwrap();
        assert_eq!(tape.shape(out), &[2, 8]);
        let od = tape.data(out);
        assert_eq!(&od[5..8], &s_data[0..3]);
        assert_eq!(&od[13..16], &s_data[3..6]);
    }

    #[test]
    fn zero_proj_weights_zero_first_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let params = CompressorParams::register(&mut store, 3, 4, &mut rng);
        store.data_mut(params.proj.w).fill(0.0);
        let mut tape = Tape::new();
        let mut gp = GraphParams::new(&store);
        let h = tape.leaf(vec![1.0, 2.0, 3.0], vec![1, 3]).unwrap();
        let s = tape.leaf(vec![9.0], vec![1, 1]).unwrap();
        let out = scene_concat(&mut tape, &mut gp, &params, h, s).unwrap();
        // gelu(0) = 0, bias zero-initialized
        assert_eq!(tape.data(out), &[0.0, 0.0, 0.0, 0.0, 9.0]);
    }
}

//! Cross-attention against an explicit per-query loop oracle, plus
//! row-stochasticity and masking properties.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vodp::encoder::{geometric_encode, semantic_encode, EncoderParams, PatchConfig};
use vodp::fuser::{fuse_frame, Downsample, FuserParams, Modality};
use vodp::nn::{GraphParams, MultiHeadAttention, ParamStore};
use vodp::tensor::Tape;

fn ramp(n: usize, k: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * k + 5) % 31) as f64 * 0.07 - 1.0).collect()
}

/// Independent multi-head attention: per head, per query, raw loops and a
/// naive softmax. Scores scaled by 1/sqrt(C) to match the implementation.
#[allow(clippy::too_many_arguments)]
fn loop_attention(
    q_in: &[f64],
    kv_in: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    lq: usize,
    lk: usize,
    c: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = c / heads;
    let proj = |x: &[f64], w: &[f64], rows: usize| -> Vec<f64> {
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                let mut s = 0.0;
                for p in 0..c {
                    s += x[r * c + p] * w[p * c + j];
                }
                out[r * c + j] = s;
            }
        }
        out
    };
    let q = proj(q_in, wq, lq);
    let k = proj(kv_in, wk, lk);
    let v = proj(kv_in, wv, lk);
    let scale = 1.0 / (c as f64).sqrt();

    let mut merged = vec![0.0; lq * c];
    for h in 0..heads {
        for qi in 0..lq {
            let qh = &q[qi * c + h * dh..qi * c + (h + 1) * dh];
            let mut scores = vec![0.0; lk];
            for ki in 0..lk {
                let kh = &k[ki * c + h * dh..ki * c + (h + 1) * dh];
                scores[ki] = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..dh {
                let mut acc = 0.0;
                for ki in 0..lk {
                    acc += exps[ki] / z * v[ki * c + h * dh + d];
                }
                merged[qi * c + h * dh + d] = acc;
            }
        }
    }
    proj(&merged, wo, lq)
}

#[test]
fn cross_attention_matches_loop_oracle() {
    // P <= 4 instances at 64-bit, tolerance 1e-10
    for (p, seed) in [(1usize, 1u64), (2, 2), (4, 3)] {
        let c = 8;
        let heads = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::register(&mut store, "m", c, heads, &mut rng);
        let mut tape = Tape::new();
        let mut gp = GraphParams::new(&store);
        let q_data = ramp(p * c, 3 + seed as usize);
        let kv_data = ramp(p * c, 11 + seed as usize);
        let q = tape.leaf(q_data.clone(), vec![1, p, c]).unwrap();
        let kv = tape.leaf(kv_data.clone(), vec![1, p, c]).unwrap();
        let out = mha.apply(&mut tape, &mut gp, q, kv, None).unwrap();
        let want = loop_attention(
            &q_data,
            &kv_data,
            store.data(mha.wq),
            store.data(mha.wk),
            store.data(mha.wv),
            store.data(mha.wo),
            p,
            p,
            c,
            heads,
        );
        for (got, w) in tape.data(out.out).iter().zip(&want) {
            assert!((got - w).abs() < 1e-10, "P={p}: {got} vs {w}");
        }
    }
}

#[test]
fn fuse_frame_matches_loop_oracle() {
    // full fusion path: pool -> residual cross-attention -> residual FFN,
    // with the attention stage checked against the loop oracle
    let c = 8;
    let p = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let params = FuserParams::register(&mut store, c, 4, Modality::Full, Downsample::Pool, &mut rng);
    let mut tape = Tape::new();
    let mut gp = GraphParams::new(&store);
    let g_data = ramp(p * 2 * c, 13);
    let s_data = ramp(p * c, 17);
    let g = tape.leaf(g_data.clone(), vec![p, 2 * c]).unwrap();
    let s = tape.leaf(s_data.clone(), vec![p, c]).unwrap();
    let out = fuse_frame(&mut tape, &mut gp, &params, g, s).unwrap();

    // oracle: pooled queries
    let h_prime: Vec<f64> = g_data.chunks(2).map(|pair| (pair[0] + pair[1]) * 0.5).collect();
    let attn = params.attn.as_ref().unwrap();
    let att = loop_attention(
        &h_prime,
        &s_data,
        store.data(attn.wq),
        store.data(attn.wk),
        store.data(attn.wv),
        store.data(attn.wo),
        p,
        p,
        c,
        4,
    );
    let h_second: Vec<f64> = h_prime.iter().zip(&att).map(|(a, b)| a + b).collect();
    // FFN: up -> gelu -> down, with biases
    let up_w = store.data(params.ffn.up.w);
    let up_b = store.data(params.ffn.up.b.unwrap());
    let down_w = store.data(params.ffn.down.w);
    let down_b = store.data(params.ffn.down.b.unwrap());
    let gelu = |x: f64| {
        let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
        0.5 * x * (1.0 + u.tanh())
    };
    let mut want = vec![0.0; p * c];
    for r in 0..p {
        let mut hidden = vec![0.0; 4 * c];
        for j in 0..4 * c {
            let mut s = up_b[j];
            for i in 0..c {
                s += h_second[r * c + i] * up_w[i * 4 * c + j];
            }
            hidden[j] = gelu(s);
        }
        for j in 0..c {
            let mut s = down_b[j];
            for (i, hv) in hidden.iter().enumerate() {
                s += hv * down_w[i * c + j];
            }
            want[r * c + j] = h_second[r * c + j] + s;
        }
    }
    for (got, w) in tape.data(out.fused).iter().zip(&want) {
        assert!((got - w).abs() < 1e-10, "{got} vs {w}");
    }
}

#[test]
fn all_attention_maps_row_stochastic() {
    // full encoder stack at T=3; every probe tensor must have rows that
    // sum to 1 within 1e-6 and are non-negative
    let cfg = PatchConfig { image_h: 16, image_w: 16, patch: 8, c: 8, heads: 2, aa_blocks: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let enc = EncoderParams::register(&mut store, &cfg, 3, &mut rng);
    let mut tape = Tape::new();
    let mut gp = GraphParams::new(&store);
    let d = cfg.patch_dim();
    let p = cfg.p();
    let x = tape.leaf(ramp(3 * p * d, 9), vec![3, p, d]).unwrap();
    let mut probes = Vec::new();
    let sem = semantic_encode(&mut tape, &mut gp, &enc, x, &mut probes).unwrap();
    let _ = geometric_encode(&mut tape, &mut gp, &enc, sem, 1, 3, None, &mut probes).unwrap();
    assert!(probes.len() >= 6, "expected probes from sem and aa blocks");
    for probe in probes {
        let shape = tape.shape(probe).to_vec();
        let lk = *shape.last().unwrap();
        for row in tape.data(probe).chunks(lk) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn masked_global_keys_match_fewer_frame_run() {
    // masking frame 2's tokens out of the global attention reproduces a
    // T=2 run exactly for the unaffected frames
    let cfg = PatchConfig { image_h: 16, image_w: 16, patch: 8, c: 8, heads: 2, aa_blocks: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let enc = EncoderParams::register(&mut store, &cfg, 3, &mut rng);
    let p = cfg.p();
    let d = cfg.patch_dim();
    let frames: Vec<Vec<f64>> = (0..3).map(|f| ramp(p * d, 3 + 2 * f)).collect();

    // run 1: all three frames, frame 2 masked out of global attention
    let mut tape = Tape::<f64>::new();
    let mut gp = GraphParams::new(&store);
    let mut data = Vec::new();
    for f in &frames {
        data.extend_from_slice(f);
    }
    let x = tape.leaf(data, vec![3, p, d]).unwrap();
    let mut probes = Vec::new();
    let sem = semantic_encode(&mut tape, &mut gp, &enc, x, &mut probes).unwrap();
    let mut mask = vec![0.0f64; 3 * p];
    for m in mask[2 * p..].iter_mut() {
        *m = -1e30;
    }
    let mask = tape.leaf(mask, vec![3 * p]).unwrap();
    let geo = geometric_encode(&mut tape, &mut gp, &enc, sem, 1, 3, Some(mask), &mut probes).unwrap();
    let masked_out = tape.data(geo.geo).to_vec();

    // run 2: only frames 0 and 1 (frame embeddings 0/1 match run 1)
    let mut tape2 = Tape::<f64>::new();
    let mut gp2 = GraphParams::new(&store);
    let mut data2 = Vec::new();
    data2.extend_from_slice(&frames[0]);
    data2.extend_from_slice(&frames[1]);
    let x2 = tape2.leaf(data2, vec![2, p, d]).unwrap();
    let mut probes2 = Vec::new();
    let sem2 = semantic_encode(&mut tape2, &mut gp2, &enc, x2, &mut probes2).unwrap();
    let geo2 = geometric_encode(&mut tape2, &mut gp2, &enc, sem2, 1, 2, None, &mut probes2).unwrap();
    let small_out = tape2.data(geo2.geo).to_vec();

    let per_frame = p * 2 * cfg.c;
    for i in 0..2 * per_frame {
        assert!(
            (masked_out[i] - small_out[i]).abs() < 1e-9,
            "masked T=3 vs T=2 at {i}: {} vs {}",
            masked_out[i],
            small_out[i]
        );
    }
}

#[test]
fn frame_embedding_requires_matching_history() {
    // T=3 joint run differs from three independent T=1 runs: global
    // attention mixes frames
    let cfg = PatchConfig { image_h: 16, image_w: 16, patch: 8, c: 8, heads: 2, aa_blocks: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::<f64>::new();
    let enc = EncoderParams::register(&mut store, &cfg, 3, &mut rng);
    let p = cfg.p();
    let d = cfg.patch_dim();
    let frames: Vec<Vec<f64>> = (0..3).map(|f| ramp(p * d, 5 + 3 * f)).collect();

    let mut tape = Tape::<f64>::new();
    let mut gp = GraphParams::new(&store);
    let mut data = Vec::new();
    for f in &frames {
        data.extend_from_slice(f);
    }
    let x = tape.leaf(data, vec![3, p, d]).unwrap();
    let mut probes = Vec::new();
    let sem = semantic_encode(&mut tape, &mut gp, &enc, x, &mut probes).unwrap();
    let geo = geometric_encode(&mut tape, &mut gp, &enc, sem, 1, 3, None, &mut probes).unwrap();
    let joint = tape.data(geo.geo).to_vec();

    // frame 0 alone (same frame embedding row 0)
    let mut tape2 = Tape::<f64>::new();
    let mut gp2 = GraphParams::new(&store);
    let x2 = tape2.leaf(frames[0].clone(), vec![1, p, d]).unwrap();
    let mut probes2 = Vec::new();
    let sem2 = semantic_encode(&mut tape2, &mut gp2, &enc, x2, &mut probes2).unwrap();
    let geo2 = geometric_encode(&mut tape2, &mut gp2, &enc, sem2, 1, 1, None, &mut probes2).unwrap();
    let solo = tape2.data(geo2.geo).to_vec();

    let per_frame = p * 2 * cfg.c;
    let differs = (0..per_frame).any(|i| (joint[i] - solo[i]).abs() > 1e-9);
    assert!(differs, "global attention must mix frames");
}

//! Minimal dense tensor engine: exactly the op set the architecture needs,
//! with reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod kernels;
mod scalar;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use scalar::Scalar;
pub use tape::{numel, Tape, ValueId};

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_ones() {
        let mut t = tape();
        let a = t.leaf(vec![1.0; 6], vec![2, 3]).unwrap();
        let b = t.leaf(vec![1.0; 6], vec![3, 2]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 2]);
        assert!(t.data(c).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let x_data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let i4 = t.leaf(eye, vec![4, 4]).unwrap();
        let x = t.leaf(x_data.clone(), vec![4, 3]).unwrap();
        let y = t.matmul(i4, x).unwrap();
        assert_eq!(t.data(y), &x_data[..]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        // fixed "random" values; compared against an explicit triple loop
        let a: Vec<f64> = (0..9).map(|i| ((i * 37 + 11) % 19) as f64 * 0.17 - 1.5).collect();
        let b: Vec<f64> = (0..9).map(|i| ((i * 53 + 7) % 23) as f64 * 0.13 - 1.2).collect();
        let mut want = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[p * 3 + j];
                }
                want[i * 3 + j] = s;
            }
        }
        let mut t = tape();
        let ai = t.leaf(a, vec![3, 3]).unwrap();
        let bi = t.leaf(b, vec![3, 3]).unwrap();
        let c = t.matmul(ai, bi).unwrap();
        for (got, w) in t.data(c).iter().zip(&want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = tape();
        let a = t.leaf(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.leaf(vec![0.0; 8], vec![4, 2]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut t = tape();
        let x = t.leaf(vec![0.0; 4], vec![4]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert!(t.data(s).iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let big = t.leaf(vec![1000.0, 1000.0], vec![2]).unwrap();
        let s2 = t.softmax(big, 0).unwrap();
        assert!(t.data(s2).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let x: Vec<f64> = (0..7).map(|i| ((i * 29 + 3) % 13) as f64 * 0.31 - 2.0).collect();
        let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut t = tape();
        let xi = t.leaf(x, vec![7]).unwrap();
        let s = t.softmax(xi, 0).unwrap();
        for (got, e) in t.data(s).iter().zip(&exps) {
            assert!((got - e / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = tape();
        let x = t.leaf(vec![3.7; 8], vec![8]).unwrap();
        let g = t.leaf(vec![1.0; 8], vec![8]).unwrap();
        let b = t.leaf(vec![0.0; 8], vec![8]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.data(y).iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_moments() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 41 + 5) % 17) as f64 * 0.23 - 1.7).collect();
        let mut t = tape();
        let xi = t.leaf(x, vec![16]).unwrap();
        let g = t.leaf(vec![1.0; 16], vec![16]).unwrap();
        let b = t.leaf(vec![0.0; 16], vec![16]).unwrap();
        let y = t.layer_norm(xi, g, b, 1e-5).unwrap();
        let out = t.data(y);
        let mean: f64 = out.iter().sum::<f64>() / 16.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-7, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }

    #[test]
    fn avg_pool_pairs() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 3.0, 5.0, 7.0], vec![4]).unwrap();
        let y = t.avg_pool_1d(x).unwrap();
        assert_eq!(t.data(y), &[2.0, 6.0]);

        let c = t.leaf(vec![0.42; 128], vec![128]).unwrap();
        let yc = t.avg_pool_1d(c).unwrap();
        assert_eq!(t.shape(yc), &[64]);
        assert!(t.data(yc).iter().all(|&v| v == 0.42));
    }

    #[test]
    fn avg_pool_odd_extent_rejected() {
        let mut t = tape();
        let x = t.leaf(vec![0.0; 5], vec![5]).unwrap();
        assert!(t.avg_pool_1d(x).is_err());
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut t = tape();
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let xi = t.leaf(x.clone(), vec![1, 1, 5, 5]).unwrap();
        let w = t.leaf(vec![2.0], vec![1, 1, 1, 1]).unwrap();
        let b = t.leaf(vec![0.0], vec![1]).unwrap();
        let y = t.conv2d(xi, w, b, (1, 1), (0, 0)).unwrap();
        for (got, v) in t.data(y).iter().zip(&x) {
            assert_eq!(*got, v * 2.0);
        }
    }

    #[test]
    fn conv2d_counting_center() {
        let mut t = tape();
        let xi = t.leaf(vec![1.0; 25], vec![1, 1, 5, 5]).unwrap();
        let w = t.leaf(vec![1.0; 9], vec![1, 1, 3, 3]).unwrap();
        let b = t.leaf(vec![0.0], vec![1]).unwrap();
        let y = t.conv2d(xi, w, b, (1, 1), (1, 1)).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 5, 5]);
        assert_eq!(t.data(y)[2 * 5 + 2], 9.0);
        assert_eq!(t.data(y)[0], 4.0); // corner sees a 2x2 window
    }

    #[test]
    fn conv2d_against_six_loop_oracle() {
        let (cin, cout, h, w, kh, kw) = (2, 3, 5, 4, 3, 3);
        let stride = (2, 1);
        let pad = (1, 1);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 31 + 7) % 23) as f64 * 0.11 - 1.0).collect();
        let wt: Vec<f64> = (0..cout * cin * kh * kw).map(|i| ((i * 17 + 3) % 19) as f64 * 0.09 - 0.8).collect();
        let bias = vec![0.3, -0.2, 0.1];
        let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
        let mut want = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    s += x[(ci * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    want[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        let mut t = tape();
        let xi = t.leaf(x, vec![1, cin, h, w]).unwrap();
        let wi = t.leaf(wt, vec![cout, cin, kh, kw]).unwrap();
        let bi = t.leaf(bias, vec![cout]).unwrap();
        let y = t.conv2d(xi, wi, bi, stride, pad).unwrap();
        for (got, wv) in t.data(y).iter().zip(&want) {
            assert!((got - wv).abs() < 1e-10);
        }
    }

    #[test]
    fn adaptive_pool_means() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
        let y = t.adaptive_avg_pool_2d(x).unwrap();
        assert_eq!(t.data(y), &[2.5]);

        let c = t.leaf(vec![0.7; 36], vec![1, 1, 6, 6]).unwrap();
        let yc = t.adaptive_avg_pool_2d(c).unwrap();
        assert!((t.data(yc)[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = tape();
        let x = t.param(vec![0.1, -0.5, 2.0], vec![3]).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_half_square_gives_x() {
        let mut t = tape();
        let data = vec![0.3, -1.2, 0.8, 2.5];
        let x = t.param(data.clone(), vec![4]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        let loss = t.scale(s, 0.5).unwrap();
        t.backward(loss).unwrap();
        for (g, v) in t.grad(x).unwrap().iter().zip(&data) {
            assert!((g - v).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_accumulates_reuse() {
        let mut t = tape();
        let x = t.param(vec![1.0, 2.0], vec![2]).unwrap();
        let y = t.add(x, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = tape();
        let x = t.param(vec![1.0, 2.0], vec![2]).unwrap();
        let y = t.add(x, x).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn non_finite_is_surfaced() {
        let mut t = tape();
        let x = t.leaf(vec![1e308], vec![1]).unwrap();
        let y = t.leaf(vec![1e308], vec![1]).unwrap();
        let err = t.mul(x, y).unwrap_err();
        assert!(matches!(err, crate::error::Error::NonFinite { .. }));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let back = t.slice(c, 1, 2, 2).unwrap();
        assert_eq!(t.data(back), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn permute_transposes() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        let p = t.permute(a, &[1, 0]).unwrap();
        assert_eq!(t.shape(p), &[3, 2]);
        assert_eq!(t.data(p), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn broadcast_add_bias() {
        let mut t = tape();
        let x = t.param(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = t.param(vec![10.0, 20.0], vec![2]).unwrap();
        let y = t.add(x, b).unwrap();
        assert_eq!(t.data(y), &[11.0, 22.0, 13.0, 24.0]);
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_batched_broadcast() {
        // (2,2,3) @ (3,2) and (2,2,3) @ (2,3,2)
        let a: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let b2: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
        let mut t = tape();
        let ai = t.leaf(a.clone(), vec![2, 2, 3]).unwrap();
        let bi = t.leaf(b2.clone(), vec![3, 2]).unwrap();
        let y = t.matmul(ai, bi).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 2]);
        // spot check via loop on batch 1, row 1
        let mut s = [0.0; 2];
        for j in 0..2 {
            for p in 0..3 {
                s[j] += a[(1 * 2 + 1) * 3 + p] * b2[p * 2 + j];
            }
        }
        assert_eq!(&t.data(y)[6..8], &s);

        let b3: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        let bi3 = t.leaf(b3, vec![2, 3, 2]).unwrap();
        let y2 = t.matmul(ai, bi3).unwrap();
        assert_eq!(t.shape(y2), &[2, 2, 2]);
    }
}

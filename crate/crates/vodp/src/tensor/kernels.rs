//! Dense 2-D kernels behind the tape ops.
//!
//! Every kernel accumulates each output element in a fixed sequential order
//! (the contraction index ascending), so results are bitwise reproducible
//! regardless of how the row loop is scheduled across threads.

use rayon::prelude::*;

use super::scalar::Scalar;

// Below this many output rows the rayon dispatch overhead is not worth it.
const PAR_ROWS: usize = 64;

/// C[m,n] = A[m,k] · B[k,n]
pub fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let row = |i: usize, crow: &mut [S]| {
        crow.fill(S::ZERO);
        for p in 0..k {
            let aik = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cx, bx) in crow.iter_mut().zip(brow) {
                *cx += aik * *bx;
            }
        }
    };
    if m >= PAR_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ  (contraction over contiguous rows of both)
pub fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let row = |i: usize, crow: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cx) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::ZERO;
            for (ax, bx) in arow.iter().zip(brow) {
                s += *ax * *bx;
            }
            *cx = s;
        }
    };
    if m >= PAR_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]  (contraction over the shared row index m)
pub fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let row = |i: usize, crow: &mut [S]| {
        crow.fill(S::ZERO);
        for p in 0..m {
            let api = a[p * k + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cx, bx) in crow.iter_mut().zip(brow) {
                *cx += api * *bx;
            }
        }
    };
    if k >= PAR_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// Unfold conv2d input patches into columns.
///
/// `x` is one image (cin, h, w); output is (cin*kh*kw, oh*ow), column q
/// holding the receptive field of output position q in channel-major,
/// row-major order. Out-of-bounds taps (from padding) are zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    col: &mut [S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) {
    let ncols = oh * ow;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                let out = &mut col[r * ncols..(r + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                        out[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < h
                            && ix >= 0
                            && (ix as usize) < w
                        {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            S::ZERO
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back onto the input plane (adjoint of `im2col`).
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<S: Scalar>(
    col: &[S],
    x: &mut [S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) {
    let ncols = oh * ow;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                let src = &col[r * ncols..(r + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

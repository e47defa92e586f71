//! Shared helpers for unit tests, including independent brute-force oracles.
//! Test-only: oracles here must never call the kernels they are used to check.

use rand::Rng;

use crate::rng::rng_from_seed;
use crate::tensor::{Shape, Tensor};

/// Uniform random tensor in [-1, 1], reproducible from `seed`.
pub fn rand_tensor(shape: impl Into<Shape>, seed: u64) -> Tensor {
    let shape = shape.into();
    let mut rng = rng_from_seed(seed);
    let data: Vec<f32> = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("rand tensor shape")
}

/// Asserts `max |a - b| <= tol * max(1, ||a||_inf, ||b||_inf)`.
/// With `tol == 0` this is exact equality.
pub fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len(), "length mismatch: {} vs {}", a.len(), b.len());
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(1.0f32, |m, &v| m.max(v.abs()));
    let mut worst = 0.0f32;
    let mut worst_i = 0;
    for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
        let d = (x - y).abs();
        if d > worst {
            worst = d;
            worst_i = i;
        }
    }
    assert!(
        worst <= tol * scale,
        "max diff {} at index {} ({} vs {}) exceeds tol {} (scale {})",
        worst,
        worst_i,
        a[worst_i],
        b[worst_i],
        tol,
        scale
    );
}

/// Direct nested-loop cross-correlation, the independent oracle for conv2d.
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let xs = x.shape();
    let ks = w.shape();
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let oh = (xs.h + 2 * ph - ks.h) / sh + 1;
    let ow = (xs.w + 2 * pw - ks.w) / sw + 1;
    let os = Shape::new(xs.n, ks.n, oh, ow);
    let mut out = vec![0.0f32; os.numel()];
    for n in 0..xs.n {
        for co in 0..ks.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..ks.c {
                        for kh in 0..ks.h {
                            for kw in 0..ks.w {
                                let iy = (oy * sh + kh) as isize - ph as isize;
                                let ix = (ox * sw + kw) as isize - pw as isize;
                                if iy < 0 || iy >= xs.h as isize || ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, kh, kw);
                            }
                        }
                    }
                    out[os.idx(n, co, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(os, out).expect("naive conv shape")
}

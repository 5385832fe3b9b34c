//! Independent reference routines shared by the integration tests.

#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3, ArrayBase, Data, Dimension};
use rand::Rng;

pub fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn outer(d: &Array1<f64>, a: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((d.len(), a.len()), |(i, j)| d[i] * a[j])
}

pub fn max_abs_diff<S, T, D>(a: &ArrayBase<S, D>, b: &ArrayBase<T, D>) -> f64
where
    S: Data<Elem = f64>,
    T: Data<Elem = f64>,
    D: Dimension,
{
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Bit `i` of `mask` set means sign `i` is −1.
pub fn signs_from_mask(mask: u32, n: usize) -> Vec<f64> {
    (0..n).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect()
}

fn tap(x: &Array3<f64>, oy: usize, ox: usize, ky: usize, kx: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let y = (oy * stride + ky) as isize - pad as isize;
    let xx = (ox * stride + kx) as isize - pad as isize;
    let (h, w, _) = x.dim();
    (y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w).then_some((y as usize, xx as usize))
}

fn out_side(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Textbook convolution; `w` is `c_out x (k·k·c_in)` in `(ky, kx, c)` order.
pub fn direct_conv(x: &Array3<f64>, w: &Array2<f64>, k: usize, stride: usize, pad: usize) -> Array3<f64> {
    let (h, wd, c_in) = x.dim();
    let (ho, wo) = (out_side(h, k, stride, pad), out_side(wd, k, stride, pad));
    let mut y = Array3::zeros((ho, wo, w.nrows()));
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..w.nrows() {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some((iy, ix)) = tap(x, oy, ox, ky, kx, stride, pad) {
                            for c in 0..c_in {
                                acc += w[[o, (ky * k + kx) * c_in + c]] * x[[iy, ix, c]];
                            }
                        }
                    }
                }
                y[[oy, ox, o]] = acc;
            }
        }
    }
    y
}

/// `∂/∂W` of `Σ δ ⊙ conv(x, W)`.
pub fn direct_conv_weight_grad(x: &Array3<f64>, delta: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let c_in = x.dim().2;
    let (ho, wo, c_out) = delta.dim();
    let mut g = Array2::zeros((c_out, k * k * c_in));
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((iy, ix)) = tap(x, oy, ox, ky, kx, stride, pad) {
                        for o in 0..c_out {
                            for c in 0..c_in {
                                g[[o, (ky * k + kx) * c_in + c]] += delta[[oy, ox, o]] * x[[iy, ix, c]];
                            }
                        }
                    }
                }
            }
        }
    }
    g
}

/// Singular values via nalgebra, descending.
pub fn reference_singular_values(a: &Array2<f64>) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

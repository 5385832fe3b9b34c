//! Patch extraction for convolutions.
//!
//! Feature maps are `h x w x c` (channels last). Row `p = oy·w_out + ox` of
//! the unrolled matrix holds the receptive field of output pixel `(oy, ox)`
//! flattened in `(kh, kw, c_in)` order, with zeros for padded positions.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use super::LayerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h_in: usize,
    pub w_in: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        (h_in, w_in, c_in): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self, LayerError> {
        if stride == 0 || kh == 0 || kw == 0 || c_in == 0 {
            return Err(LayerError::Geometry(format!(
                "kernel {kh}x{kw}, stride {stride} and {c_in} input channels must be positive"
            )));
        }
        let span_h = h_in + 2 * pad;
        let span_w = w_in + 2 * pad;
        if span_h < kh || span_w < kw {
            return Err(LayerError::Geometry(format!(
                "kernel {kh}x{kw} does not fit padded input {span_h}x{span_w}"
            )));
        }
        Ok(Self {
            h_in,
            w_in,
            c_in,
            kh,
            kw,
            stride,
            pad,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        })
    }

    pub fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    /// Input coordinate for kernel tap `(ky, kx)` at output pixel `(oy, ox)`,
    /// or `None` when it falls in the padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h_in && x < self.w_in).then_some((y, x))
    }
}

pub fn im2col_with(x: ArrayView3<f64>, g: &ConvGeometry) -> Array2<f64> {
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let (patch, c) = (g.patch_len(), g.c_in);
    let mut out = vec![0.0; g.pixels() * patch];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = (oy * g.w_out + ox) * patch;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                        let dst = row + (ky * g.kw + kx) * c;
                        let from = (y * g.w_in + xx) * c;
                        out[dst..dst + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.pixels(), patch), out).expect("sized above")
}

/// Unrolls `x` into a `(h_out·w_out) x (kh·kw·c_in)` patch matrix.
pub fn im2col(
    x: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Array2<f64>, LayerError> {
    let g = ConvGeometry::new(x.dim(), (kh, kw), stride, pad)?;
    Ok(im2col_with(x, &g))
}

/// Adjoint of [`im2col_with`]: scatters patch rows back, summing overlaps.
pub fn col2im(cols: ArrayView2<f64>, g: &ConvGeometry) -> Array3<f64> {
    let cs = cols.as_standard_layout();
    let src = cs.as_slice().expect("standard layout");
    let (patch, c) = (g.patch_len(), g.c_in);
    let mut out = vec![0.0; g.h_in * g.w_in * c];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = (oy * g.w_out + ox) * patch;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                        let from = row + (ky * g.kw + kx) * c;
                        let dst = (y * g.w_in + xx) * c;
                        for (d, &v) in out[dst..dst + c].iter_mut().zip(&src[from..from + c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((g.h_in, g.w_in, c), out).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn one_by_one_kernel_is_reshape() {
        let x = Array::from_shape_fn((3, 4, 2), |(i, j, k)| (i * 8 + j * 2 + k) as f64);
        let cols = im2col(x.view(), 1, 1, 1, 0).unwrap();
        assert_eq!(cols.dim(), (12, 2));
        assert_eq!(cols.as_slice().unwrap(), x.as_slice().unwrap());
    }

    #[test]
    fn padded_corner_has_four_zeros() {
        let x = Array3::from_elem((4, 4, 1), 1.0);
        let cols = im2col(x.view(), 3, 3, 1, 1).unwrap();
        assert_eq!(cols.dim(), (16, 9));
        let zeros = cols.row(0).iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 5);
        // Corner taps (0,0),(0,1),(0,2),(1,0),(2,0) fall in the padding.
        assert_eq!(cols.row(0).to_vec(), vec![0., 0., 0., 0., 1., 1., 0., 1., 1.]);
    }

    #[test]
    fn rejects_oversized_kernel() {
        let x = Array3::<f64>::zeros((2, 2, 1));
        assert!(im2col(x.view(), 3, 3, 1, 0).is_err());
        assert!(im2col(x.view(), 1, 1, 0, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint() {
        let g = ConvGeometry::new((5, 4, 2), (3, 2), 2, 1).unwrap();
        let x = Array::from_shape_fn((5, 4, 2), |(i, j, k)| ((i * 7 + j * 3 + k) % 5) as f64 - 2.0);
        let c = Array::from_shape_fn((g.pixels(), g.patch_len()), |(i, j)| ((i + 2 * j) % 7) as f64);
        let lhs = (&im2col_with(x.view(), &g) * &c).sum();
        let rhs = (&x * &col2im(c.view(), &g)).sum();
        assert_eq!(lhs, rhs);
    }
}

use ndarray::{Array3, ArrayView3};

use super::{col2im, im2col_with, AffineCore, BackwardCtx, ConvGeometry, LayerError};

/// 2-D convolution lowered to an affine stage over im2col rows.
///
/// The kernel is stored as `c_out x (kh·kw·c_in)`, i.e. `c_out x kh x kw x
/// c_in` flattened row-major, and every output pixel is one accumulator pair.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub geom: ConvGeometry,
    pub core: AffineCore,
}

impl ConvLayer {
    pub fn new(geom: ConvGeometry, core: AffineCore) -> Result<Self, LayerError> {
        if core.n_i() != geom.patch_len() {
            return Err(LayerError::Shape {
                what: "kernel patch length",
                expected: geom.patch_len().to_string(),
                got: core.n_i().to_string(),
            });
        }
        Ok(Self { geom, core })
    }

    pub fn out_dim(&self) -> (usize, usize, usize) {
        (self.geom.h_out, self.geom.w_out, self.core.n_o())
    }

    pub fn forward(&mut self, x: ArrayView3<f64>, update_stats: bool) -> Result<Array3<f64>, LayerError> {
        let g = &self.geom;
        if x.dim() != (g.h_in, g.w_in, g.c_in) {
            return Err(LayerError::Shape {
                what: "conv input",
                expected: format!("{:?}", (g.h_in, g.w_in, g.c_in)),
                got: format!("{:?}", x.dim()),
            });
        }
        let cols = im2col_with(x, g);
        let out = self.core.forward(cols.view(), update_stats)?;
        Ok(out
            .into_shape_with_order(self.out_dim())
            .expect("pixel rows are contiguous"))
    }

    pub fn backward(&mut self, delta: ArrayView3<f64>, ctx: &BackwardCtx) -> Result<Array3<f64>, LayerError> {
        if delta.dim() != self.out_dim() {
            return Err(LayerError::Shape {
                what: "conv upstream gradient",
                expected: format!("{:?}", self.out_dim()),
                got: format!("{:?}", delta.dim()),
            });
        }
        let rows = delta
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.geom.pixels(), self.core.n_o()))
            .expect("contiguous");
        let d_cols = self.core.backward(rows.view(), ctx)?;
        Ok(col2im(d_cols.view(), &self.geom))
    }
}

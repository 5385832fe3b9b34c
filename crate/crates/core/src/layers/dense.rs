use ndarray::{Array1, Array2, ArrayView1};

use super::{AffineCore, BackwardCtx, LayerError};

/// Fully connected layer on a flat input vector.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub core: AffineCore,
}

impl DenseLayer {
    pub fn new(core: AffineCore) -> Self {
        Self { core }
    }

    pub fn forward(&mut self, a: ArrayView1<f64>, update_stats: bool) -> Result<Array1<f64>, LayerError> {
        let rows = a.insert_axis(ndarray::Axis(0));
        let out = self.core.forward(rows, update_stats)?;
        Ok(out.row(0).to_owned())
    }

    pub fn backward(&mut self, delta: ArrayView1<f64>, ctx: &BackwardCtx) -> Result<Array1<f64>, LayerError> {
        let rows: Array2<f64> = delta.insert_axis(ndarray::Axis(0)).to_owned();
        let d = self.core.backward(rows.view(), ctx)?;
        Ok(d.row(0).to_owned())
    }
}

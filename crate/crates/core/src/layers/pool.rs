use ndarray::{Array3, ArrayView3};

use super::LayerError;

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    in_dim: Option<(usize, usize, usize)>,
    argmax: Vec<(usize, usize)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn out_dim((h, w, c): (usize, usize, usize)) -> (usize, usize, usize) {
        (h / 2, w / 2, c)
    }

    pub fn forward(&mut self, x: ArrayView3<f64>) -> Array3<f64> {
        let (h, w, c) = x.dim();
        let (ho, wo, _) = Self::out_dim((h, w, c));
        let mut out = Array3::zeros((ho, wo, c));
        self.argmax.clear();
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = (2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if x[[y, xx, ch]] > x[[best.0, best.1, ch]] {
                            best = (y, xx);
                        }
                    }
                    out[[oy, ox, ch]] = x[[best.0, best.1, ch]];
                    self.argmax.push(best);
                }
            }
        }
        self.in_dim = Some((h, w, c));
        out
    }

    pub fn backward(&self, delta: ArrayView3<f64>) -> Result<Array3<f64>, LayerError> {
        let dim = self.in_dim.ok_or(LayerError::NoForward)?;
        let (ho, wo, c) = Self::out_dim(dim);
        if delta.dim() != (ho, wo, c) {
            return Err(LayerError::Shape {
                what: "pool upstream gradient",
                expected: format!("{:?}", (ho, wo, c)),
                got: format!("{:?}", delta.dim()),
            });
        }
        let mut out = Array3::zeros(dim);
        let mut idx = 0;
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let (y, x) = self.argmax[idx];
                    out[[y, x, ch]] += delta[[oy, ox, ch]];
                    idx += 1;
                }
            }
        }
        Ok(out)
    }
}

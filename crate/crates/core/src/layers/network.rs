use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AffineCore, ApplyEvent, ApplyParams, BackwardCtx, BnMode, ConvGeometry, ConvLayer, DenseLayer,
    LayerError, MaxNorm, MaxPool2, StreamBn,
};
use crate::lowrank::{FactorStorage, LowRankState, Variant};
use crate::quant::{QuantProfile, Quantizer};

fn default_kernel() -> usize {
    3
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default = "default_one")]
        pad: usize,
    },
    Pool,
    Dense {
        out: usize,
    },
}

/// Network topology. The last layer must be dense and produces logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Input shape `[height, width, channels]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Default for NetSpec {
    /// Four 3x3 convolutions with two pools, then two dense layers.
    fn default() -> Self {
        let conv = |c| LayerSpec::Conv {
            out_channels: c,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        Self {
            input: [28, 28, 1],
            layers: vec![
                conv(8),
                conv(8),
                LayerSpec::Pool,
                conv(16),
                conv(16),
                LayerSpec::Pool,
                LayerSpec::Dense { out: 64 },
                LayerSpec::Dense { out: 10 },
            ],
        }
    }
}

/// Low-rank accumulator settings shared by all weight layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtOptions {
    pub rank: usize,
    pub conv_variant: Variant,
    pub fc_variant: Variant,
    pub kappa_th: f64,
    pub storage: FactorStorage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOptions {
    pub quant: QuantProfile,
    pub batch_norm: bool,
    pub bn_mode: BnMode,
    pub maxnorm: bool,
    pub lrt: Option<LrtOptions>,
    pub conv_batch: usize,
    pub fc_batch: usize,
}

impl Default for NetOptions {
    fn default() -> Self {
        Self {
            quant: QuantProfile::default(),
            batch_norm: true,
            bn_mode: BnMode::Streaming,
            maxnorm: false,
            lrt: None,
            conv_batch: 10,
            fc_batch: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    Pool(MaxPool2),
    Dense(DenseLayer),
}

impl Layer {
    pub fn core(&self) -> Option<&AffineCore> {
        match self {
            Layer::Conv(c) => Some(&c.core),
            Layer::Dense(d) => Some(&d.core),
            Layer::Pool(_) => None,
        }
    }

    pub fn core_mut(&mut self) -> Option<&mut AffineCore> {
        match self {
            Layer::Conv(c) => Some(&mut c.core),
            Layer::Dense(d) => Some(&mut d.core),
            Layer::Pool(_) => None,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv(_))
    }
}

/// Power of two nearest (in log domain) to the He-uniform limit `√(6/fan_in)`.
pub fn he_alpha(fan_in: usize) -> f64 {
    let limit = (6.0 / fan_in as f64).sqrt();
    2f64.powi(limit.log2().round() as i32)
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    input: (usize, usize, usize),
    input_quant: Quantizer,
}

impl Network {
    pub fn from_layers(input: (usize, usize, usize), layers: Vec<Layer>, input_quant: Quantizer) -> Self {
        Self {
            layers,
            input,
            input_quant,
        }
    }

    pub fn build(spec: &NetSpec, opts: &NetOptions, seed: u64) -> Result<Self, LayerError> {
        match spec.layers.last() {
            Some(LayerSpec::Dense { .. }) => {}
            _ => return Err(LayerError::Config("the last layer must be dense".into())),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w, c] = spec.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(LayerError::Config(format!("input shape {:?} has a zero extent", spec.input)));
        }
        let mut shape = (h, w, c);
        let n_layers = spec.layers.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (idx, ls) in spec.layers.iter().enumerate() {
            let is_output = idx + 1 == n_layers;
            match *ls {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if out_channels == 0 {
                        return Err(LayerError::Config(format!("layer {idx}: zero output channels")));
                    }
                    let geom = ConvGeometry::new(shape, (kernel, kernel), stride, pad)?;
                    let core = make_core(
                        &mut rng,
                        out_channels,
                        geom.patch_len(),
                        opts,
                        opts.conv_batch,
                        opts.lrt.map(|l| l.conv_variant),
                        false,
                    )?;
                    let layer = ConvLayer::new(geom, core)?;
                    shape = layer.out_dim();
                    layers.push(Layer::Conv(layer));
                }
                LayerSpec::Pool => {
                    shape = MaxPool2::out_dim(shape);
                    if shape.0 == 0 || shape.1 == 0 {
                        return Err(LayerError::Config(format!("layer {idx}: pooling an empty map")));
                    }
                    layers.push(Layer::Pool(MaxPool2::new()));
                }
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(LayerError::Config(format!("layer {idx}: zero output width")));
                    }
                    let n_i = shape.0 * shape.1 * shape.2;
                    let core = make_core(
                        &mut rng,
                        out,
                        n_i,
                        opts,
                        opts.fc_batch,
                        opts.lrt.map(|l| l.fc_variant),
                        is_output,
                    )?;
                    shape = (1, 1, out);
                    layers.push(Layer::Dense(DenseLayer::new(core)));
                }
            }
        }
        Ok(Self::from_layers((h, w, c), layers, opts.quant.a))
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn cores(&self) -> impl Iterator<Item = &AffineCore> {
        self.layers.iter().filter_map(Layer::core)
    }

    pub fn cores_mut(&mut self) -> impl Iterator<Item = &mut AffineCore> {
        self.layers.iter_mut().filter_map(Layer::core_mut)
    }

    /// Runs the network on one `h x w x c` sample and returns the logits.
    pub fn forward(&mut self, x: ArrayView3<f64>, update_stats: bool) -> Result<Array1<f64>, LayerError> {
        if x.dim() != self.input {
            return Err(LayerError::Shape {
                what: "network input",
                expected: format!("{:?}", self.input),
                got: format!("{:?}", x.dim()),
            });
        }
        let mut t = x.to_owned();
        self.input_quant.q_inplace(&mut t);
        for layer in &mut self.layers {
            t = match layer {
                Layer::Conv(c) => c.forward(t.view(), update_stats)?,
                Layer::Pool(p) => p.forward(t.view()),
                Layer::Dense(d) => {
                    let flat = flatten(t);
                    let out = d.forward(flat.view(), update_stats)?;
                    let n = out.len();
                    out.into_shape_with_order((1, 1, n)).expect("contiguous")
                }
            };
        }
        Ok(flatten(t))
    }

    /// Backpropagates the gradient at the logits through every layer.
    pub fn backward(&mut self, d_logits: ArrayView1<f64>, ctx: &BackwardCtx) -> Result<(), LayerError> {
        let shapes = self.layer_input_shapes();
        let n = d_logits.len();
        let mut d: Array3<f64> = d_logits
            .to_owned()
            .into_shape_with_order((1, 1, n))
            .expect("contiguous");
        for (layer, in_shape) in self.layers.iter_mut().zip(shapes).rev() {
            d = match layer {
                Layer::Conv(c) => c.backward(d.view(), ctx)?,
                Layer::Pool(p) => p.backward(d.view())?,
                Layer::Dense(l) => {
                    let flat = flatten(d);
                    let back = l.backward(flat.view(), ctx)?;
                    back.into_shape_with_order(in_shape).expect("dense input is a flattened map")
                }
            };
        }
        Ok(())
    }

    fn layer_input_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut s = self.input;
        for layer in &self.layers {
            shapes.push(s);
            s = match layer {
                Layer::Conv(c) => c.out_dim(),
                Layer::Pool(_) => MaxPool2::out_dim(s),
                Layer::Dense(d) => (1, 1, d.core.n_o()),
            };
        }
        shapes
    }

    /// Moves every layer (and the input) onto `quant`; see
    /// [`AffineCore::requantize`].
    pub fn requantize(&mut self, quant: QuantProfile) {
        self.input_quant = quant.a;
        for core in self.cores_mut() {
            core.requantize(quant);
        }
    }

    /// Ends one sample in every weight layer; returns apply attempts keyed by
    /// layer index.
    pub fn finish_sample(&mut self, params: &ApplyParams) -> Vec<(usize, ApplyEvent)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, l)| l.core_mut().and_then(|c| c.finish_sample(params)).map(|e| (i, e)))
            .collect()
    }
}

fn flatten(t: Array3<f64>) -> Array1<f64> {
    let n = t.len();
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order(n)
        .expect("contiguous")
}

fn make_core<R: Rng>(
    rng: &mut R,
    n_o: usize,
    n_i: usize,
    opts: &NetOptions,
    batch: usize,
    variant: Option<Variant>,
    is_output: bool,
) -> Result<AffineCore, LayerError> {
    let w = Array2::from_shape_fn((n_o, n_i), |_| opts.quant.w.q(rng.random_range(-1.0..=1.0)));
    let mut core = AffineCore::new(w, Array1::zeros(n_o), he_alpha(n_i), opts.quant, !is_output);
    core.batch = batch.max(1);
    if opts.batch_norm && !is_output {
        core.bn = Some(StreamBn::new(n_o, core.batch, opts.bn_mode));
    }
    if opts.maxnorm {
        core.maxnorm = Some(MaxNorm::default());
    }
    let lrt_seed: u64 = rng.random();
    if let (Some(l), Some(v)) = (opts.lrt, variant) {
        core.lrt = Some(
            LowRankState::new(n_o, n_i, l.rank, v, l.kappa_th, lrt_seed)?.with_storage(l.storage),
        );
    }
    Ok(core)
}

/// Softmax cross-entropy on logits. Returns `(loss, ∂loss/∂logits, argmax)`.
pub fn softmax_cross_entropy(logits: ArrayView1<f64>, label: usize) -> (f64, Array1<f64>, usize) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let total = exp.sum();
    let mut p = exp / total;
    let loss = -(p[label].max(f64::MIN_POSITIVE)).ln();
    let pred = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    p[label] -= 1.0;
    (loss, p, pred)
}

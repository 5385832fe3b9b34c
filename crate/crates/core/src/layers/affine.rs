use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{BackwardCtx, LayerError, MaxNorm, StreamBn, WeightRoute};
use crate::lowrank::LowRankState;
use crate::quant::QuantProfile;

/// Writes applied to one weight tensor.
///
/// Every write event touches the whole tensor; `changes` records, per cell,
/// how many of those events actually moved the stored level.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteCounter {
    events: u64,
    changes: Array2<u32>,
}

impl WriteCounter {
    pub fn new(n_o: usize, n_i: usize) -> Self {
        Self {
            events: 0,
            changes: Array2::zeros((n_o, n_i)),
        }
    }

    /// Write events seen by every cell.
    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn changes(&self) -> &Array2<u32> {
        &self.changes
    }

    pub fn max_changes(&self) -> u32 {
        self.changes.iter().copied().max().unwrap_or(0)
    }

    pub fn cells_changed(&self) -> usize {
        self.changes.iter().filter(|&&c| c > 0).count()
    }

    fn record(&mut self, old: &Array2<f64>, new: &Array2<f64>) -> usize {
        self.events += 1;
        let mut moved = 0;
        Zip::from(&mut self.changes)
            .and(old)
            .and(new)
            .for_each(|c, &o, &n| {
                if o != n {
                    *c += 1;
                    moved += 1;
                }
            });
        moved
    }
}

/// Learning rate and density gate for applying accumulated updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApplyParams {
    pub base_lr: f64,
    pub rho_min: f64,
}

/// Outcome of one attempt to apply the low-rank estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApplyEvent {
    pub applied: bool,
    /// Fraction of cells with a nonzero quantized change.
    pub density: f64,
    /// Samples accumulated since the last applied update.
    pub effective_batch: u64,
    pub cells_moved: usize,
}

#[derive(Debug, Clone)]
struct Cache {
    a: Array2<f64>,
    y: Array2<f64>,
}

/// The shared `W·a + b` stage of dense and convolutional layers, operating
/// on a `pixels x n_i` block of input rows.
#[derive(Debug, Clone)]
pub struct AffineCore {
    /// `n_o x n_i` stored weights.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub alpha: f64,
    pub quant: QuantProfile,
    pub relu: bool,
    pub bn: Option<StreamBn>,
    pub maxnorm: Option<MaxNorm>,
    pub lrt: Option<LowRankState>,
    /// Nominal samples between apply attempts.
    pub batch: usize,
    pub writes: WriteCounter,
    pending: u64,
    pairs_pushed: u64,
    cache: Option<Cache>,
}

impl AffineCore {
    pub fn new(w: Array2<f64>, b: Array1<f64>, alpha: f64, quant: QuantProfile, relu: bool) -> Self {
        let (n_o, n_i) = w.dim();
        assert_eq!(b.len(), n_o, "bias length must match output width");
        Self {
            w,
            b,
            alpha,
            quant,
            relu,
            bn: None,
            maxnorm: None,
            lrt: None,
            batch: 1,
            writes: WriteCounter::new(n_o, n_i),
            pending: 0,
            pairs_pushed: 0,
            cache: None,
        }
    }

    pub fn n_o(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_i(&self) -> usize {
        self.w.ncols()
    }

    /// Pairs offered to the accumulator, including all-zero ones that are
    /// not folded because they contribute nothing.
    pub fn pairs_pushed(&self) -> u64 {
        self.pairs_pushed
    }

    pub fn pending_samples(&self) -> u64 {
        self.pending
    }

    /// Gradient of the loss with respect to `W` implied by the accumulator.
    pub fn lrt_gradient(&self) -> Option<Array2<f64>> {
        self.lrt.as_ref().map(|l| l.estimate() * self.alpha)
    }

    pub fn forward(&mut self, a: ArrayView2<f64>, update_stats: bool) -> Result<Array2<f64>, LayerError> {
        if a.ncols() != self.n_i() {
            return Err(LayerError::Shape {
                what: "layer input width",
                expected: self.n_i().to_string(),
                got: a.ncols().to_string(),
            });
        }
        let mut z = a.dot(&self.w.t()) * self.alpha + &self.b;
        self.quant.b.q_inplace(&mut z);
        let y = match self.bn.as_mut() {
            Some(bn) => {
                let mut y = bn.forward(z.view(), update_stats);
                self.quant.b.q_inplace(&mut y);
                y
            }
            None => z,
        };
        let out = if self.relu {
            let mut o = y.mapv(|v| v.max(0.0));
            self.quant.a.q_inplace(&mut o);
            o
        } else {
            y.clone()
        };
        self.cache = Some(Cache { a: a.to_owned(), y });
        Ok(out)
    }

    /// Backpropagates `delta` (gradient at this stage's output) and performs
    /// the per-sample parameter side effects selected by `ctx`.
    pub fn backward(&mut self, delta: ArrayView2<f64>, ctx: &BackwardCtx) -> Result<Array2<f64>, LayerError> {
        let cache = self.cache.take().ok_or(LayerError::NoForward)?;
        let result = self.backward_cached(&cache, delta, ctx);
        self.cache = Some(cache);
        result
    }

    fn backward_cached(
        &mut self,
        cache: &Cache,
        delta: ArrayView2<f64>,
        ctx: &BackwardCtx,
    ) -> Result<Array2<f64>, LayerError> {
        if delta.dim() != cache.y.dim() {
            return Err(LayerError::Shape {
                what: "upstream gradient",
                expected: format!("{:?}", cache.y.dim()),
                got: format!("{:?}", delta.dim()),
            });
        }
        let mut g = delta.to_owned();
        if self.relu {
            let a_spec = self.quant.a.spec().copied();
            Zip::from(&mut g).and(&cache.y).for_each(|g, &y| {
                let passes = y > 0.0 && a_spec.is_none_or(|s| y <= s.hi());
                if !passes {
                    *g = 0.0;
                }
            });
        }
        if let Some(bn) = self.bn.as_mut() {
            let (g_x, d_gamma, d_beta) = bn.backward(g.view()).ok_or(LayerError::NoForward)?;
            if ctx.train_bn && ctx.lr != 0.0 {
                let qb = self.quant.b;
                Zip::from(&mut bn.gamma).and(&d_gamma).for_each(|p, &d| *p = qb.q(*p - ctx.lr * qb.q(d)));
                Zip::from(&mut bn.beta).and(&d_beta).for_each(|p, &d| *p = qb.q(*p - ctx.lr * qb.q(d)));
            }
            g = g_x;
        }
        if let Some(mn) = self.maxnorm.as_mut() {
            g = mn.apply(g.view());
        }
        let mut dz = g;
        self.quant.g.q_inplace(&mut dz);

        let mut delta_in = dz.dot(&self.w) * self.alpha;
        self.quant.b.q_inplace(&mut delta_in);

        if ctx.train_bias && ctx.lr != 0.0 {
            let qb = self.quant.b;
            let db = dz.sum_axis(Axis(0));
            Zip::from(&mut self.b).and(&db).for_each(|b, &d| *b = qb.q(*b - ctx.lr * qb.q(d)));
        }

        let a = &cache.a;
        match ctx.weights {
            WeightRoute::Frozen => {}
            WeightRoute::Lrt => {
                if let Some(lrt) = self.lrt.as_mut() {
                    for (dz_p, a_p) in dz.axis_iter(Axis(0)).zip(a.axis_iter(Axis(0))) {
                        self.pairs_pushed += 1;
                        if dz_p.iter().all(|&v| v == 0.0) || a_p.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        lrt.update(dz_p, a_p)?;
                    }
                }
            }
            WeightRoute::Sgd { per_pixel } => {
                // Steps follow the Kronecker sum dz⊗a; α stays a fixed
                // forward scale and is not folded into the update.
                let step = ctx.lr;
                if per_pixel {
                    let pairs: Vec<_> = dz
                        .axis_iter(Axis(0))
                        .zip(a.axis_iter(Axis(0)))
                        .map(|(d, x)| outer(d.to_owned(), x.to_owned()))
                        .collect();
                    for grad in pairs {
                        self.write_update(grad * step);
                    }
                } else {
                    let grad = dz.t().dot(a);
                    self.write_update(grad * step);
                }
            }
        }
        Ok(delta_in)
    }

    /// Snaps `delta` to the weight LSB grid (no clipping).
    fn snap(&self, delta: &mut Array2<f64>) {
        if let Some(spec) = self.quant.w.spec() {
            let lsb = spec.lsb();
            delta.mapv_inplace(|d| (d / lsb).round_ties_even() * lsb);
        }
    }

    /// `W ← Qw(W − ΔW)` with `ΔW` on the weight grid; one write event.
    fn write_update(&mut self, mut delta: Array2<f64>) -> usize {
        self.snap(&mut delta);
        let mut new_w = &self.w - &delta;
        self.quant.w.q_inplace(&mut new_w);
        let moved = self.writes.record(&self.w, &new_w);
        self.w = new_w;
        moved
    }

    /// Marks the end of one sample; every `batch` samples tries to apply the
    /// accumulated estimate `ΔW = lr·L̃R̃ᵀ/√B_eff`.
    pub fn finish_sample(&mut self, params: &ApplyParams) -> Option<ApplyEvent> {
        self.lrt.as_ref()?;
        self.pending += 1;
        if self.pending % self.batch as u64 != 0 {
            return None;
        }
        Some(self.try_apply(params))
    }

    pub fn try_apply(&mut self, params: &ApplyParams) -> ApplyEvent {
        let b_eff = self.pending;
        let mut event = ApplyEvent {
            applied: false,
            density: 0.0,
            effective_batch: b_eff,
            cells_moved: 0,
        };
        let Some(lrt) = self.lrt.as_ref() else {
            return event;
        };
        if b_eff == 0 {
            return event;
        }
        let scale = params.base_lr / (b_eff as f64).sqrt();
        let mut delta = lrt.estimate() * scale;
        self.snap(&mut delta);
        let nonzero = delta.iter().filter(|&&d| d != 0.0).count();
        event.density = nonzero as f64 / delta.len() as f64;
        if event.density >= params.rho_min && nonzero > 0 {
            let mut new_w = &self.w - &delta;
            self.quant.w.q_inplace(&mut new_w);
            event.cells_moved = self.writes.record(&self.w, &new_w);
            self.w = new_w;
            self.lrt.as_mut().expect("checked above").reset();
            self.pending = 0;
            event.applied = true;
        }
        event
    }

    /// Switches to `quant`, snaps stored parameters onto its grids and clears
    /// write counters and any pending accumulation.
    pub fn requantize(&mut self, quant: QuantProfile) {
        self.quant = quant;
        quant.w.q_inplace(&mut self.w);
        quant.b.q_inplace(&mut self.b);
        if let Some(bn) = &mut self.bn {
            quant.b.q_inplace(&mut bn.gamma);
            quant.b.q_inplace(&mut bn.beta);
        }
        self.writes = WriteCounter::new(self.n_o(), self.n_i());
        if let Some(l) = &mut self.lrt {
            l.reset();
        }
        self.pending = 0;
        self.pairs_pushed = 0;
    }

    /// Scalars held outside weight memory: biases plus BN and max-norm state.
    pub fn aux_state_values(&self) -> (usize, usize, usize) {
        let bn = self.bn.as_ref().map_or(0, |b| b.state_values());
        let mn = if self.maxnorm.is_some() { 2 } else { 0 };
        (self.b.len(), bn, mn)
    }
}

fn outer(d: Array1<f64>, x: Array1<f64>) -> Array2<f64> {
    let col = d.insert_axis(Axis(1));
    let row = x.insert_axis(Axis(0));
    col.dot(&row)
}

//! Online digit dataset: IDX ingestion, partitioning, elastic augmentation,
//! distribution-shift augmentations and deterministic online streams.
//!
//! Images are `h x w` grayscale in `[0, 1]`. A synthetic seven-segment digit
//! set stands in when no IDX files are available.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;
pub const DIGIT_SIDE: usize = 28;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated IDX data: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{images} images but {labels} labels")]
    LabelMismatch { images: usize, labels: usize },
    #[error("label {0} out of range")]
    BadLabel(u8),
    #[error("need {need} source images, have {have}")]
    Insufficient { need: usize, have: usize },
    #[error("invalid data config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Images with labels, stored as an `n x h x w` block.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array3<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Array3<f64>, labels: Vec<u8>) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(DataError::LabelMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(DataError::BadLabel(bad));
        }
        Ok(Self { images, labels })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            images: Array3::zeros((0, h, w)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn image(&self, i: usize) -> ArrayView2<'_, f64> {
        self.images.slice(s![i, .., ..])
    }

    /// Copies the listed samples into a new set.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (h, w) = self.image_dims();
        let mut images = Array3::zeros((idx.len(), h, w));
        for (k, &i) in idx.iter().enumerate() {
            images.slice_mut(s![k, .., ..]).assign(&self.image(i));
        }
        Dataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            got: bytes.len(),
        })
}

/// Parses an IDX image file (`u8` pixels, 3 dims) into `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array3<f64>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            expected: need,
            got: bytes.len(),
        });
    }
    let px: Vec<f64> = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Array3::from_shape_vec((n, h, w), px).expect("length checked"))
}

/// Parses an IDX label file (`u8`, 1 dim).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            expected: need,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..need].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = parse_idx_images(&read(images)?)?;
    let labs = parse_idx_labels(&read(labels)?)?;
    Dataset::new(imgs, labs)
}

/// Serializes a set back into the two IDX byte streams.
pub fn to_idx_bytes(data: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = data.image_dims();
    let mut img = Vec::with_capacity(16 + data.images.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.images.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend_from_slice(&data.labels);
    (img, lab)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticParams {
    /// Displacement scale in pixels.
    pub alpha: f64,
    /// Smoothing width of the displacement field in pixels.
    pub sigma: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self { alpha: 8.0, sigma: 4.0 }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

// Separable Gaussian blur, zero outside the image.
fn gaussian_blur(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = x.dim();
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let jj = j as i64 + t as i64 - r;
                if (0..w as i64).contains(&jj) {
                    acc += kv * x[[i, jj as usize]];
                }
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let ii = i as i64 + t as i64 - r;
                if (0..h as i64).contains(&ii) {
                    acc += kv * tmp[[ii as usize, j]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Bilinear lookup with zeros outside the image.
fn bilinear(img: ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let px = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                v += wgt * px(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// Resamples `img` at `out[i, j] = img(map(i, j))`.
fn resample(img: ArrayView2<f64>, map: impl Fn(usize, usize) -> (f64, f64)) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (y, x) = map(i, j);
        bilinear(img, y, x).clamp(0.0, 1.0)
    })
}

/// Random smooth displacement field applied with bilinear resampling.
pub fn elastic_transform(img: ArrayView2<f64>, params: ElasticParams, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = img.dim();
    let mut field = || {
        let raw = Array2::from_shape_simple_fn(dim, || rng.random_range(-1.0..=1.0));
        gaussian_blur(&raw, params.sigma) * params.alpha
    };
    let dy = field();
    let dx = field();
    resample(img, |i, j| (i as f64 + dy[[i, j]], j as f64 + dx[[i, j]]))
}

/// Partition sizes: disjoint source splits and augmented output counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub train_source: usize,
    pub val_source: usize,
    pub online_source: usize,
    pub train: usize,
    pub val: usize,
    pub online: usize,
}

impl PartitionSizes {
    pub const FULL: Self = Self {
        train_source: 9_000,
        val_source: 1_000,
        online_source: 50_000,
        train: 50_000,
        val: 10_000,
        online: 100_000,
    };

    /// Every size divided by `factor` (rounded down, at least 1).
    pub fn scaled(&self, factor: usize) -> Self {
        let f = |v: usize| (v / factor.max(1)).max(1);
        Self {
            train_source: f(self.train_source),
            val_source: f(self.val_source),
            online_source: f(self.online_source),
            train: f(self.train),
            val: f(self.val),
            online: f(self.online),
        }
    }

    pub fn desk() -> Self {
        Self::FULL.scaled(10)
    }

    pub fn source_total(&self) -> usize {
        self.train_source + self.val_source + self.online_source
    }
}

#[derive(Debug, Clone)]
pub struct Partitions {
    /// Elastic-augmented offline training set.
    pub train: Dataset,
    /// Elastic-augmented offline validation set.
    pub val: Dataset,
    /// Un-augmented online source split; streams draw from it.
    pub online_source: Dataset,
    /// Source indices of the three splits.
    pub source_indices: [Vec<usize>; 3],
    /// Length of online streams built from these partitions.
    pub online_len: usize,
}

/// `n` samples from `src`: each source image once (while room remains),
/// then elastic copies of randomly drawn sources.
fn elastic_expand(src: &Dataset, n: usize, params: ElasticParams, rng: &mut ChaCha8Rng) -> Dataset {
    let (h, w) = src.image_dims();
    let mut images = Array3::zeros((n, h, w));
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let (i, img) = if k < src.len() {
            (k, src.image(k).to_owned())
        } else {
            let i = rng.random_range(0..src.len());
            (i, elastic_transform(src.image(i), params, rng.next_u64()))
        };
        images.slice_mut(s![k, .., ..]).assign(&img);
        labels.push(src.labels[i]);
    }
    Dataset { images, labels }
}

/// Shuffles the source into disjoint splits and augments the offline ones.
pub fn make_partitions(
    source: &Dataset,
    sizes: PartitionSizes,
    elastic: ElasticParams,
    seed: u64,
) -> Result<Partitions> {
    let need = sizes.source_total();
    if source.len() < need {
        return Err(DataError::Insufficient {
            need,
            have: source.len(),
        });
    }
    if sizes.train_source == 0 || sizes.val_source == 0 || sizes.online_source == 0 {
        return Err(DataError::Config("partition sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..source.len()).collect();
    perm.shuffle(&mut rng);
    let a = sizes.train_source;
    let b = a + sizes.val_source;
    let idx = [perm[..a].to_vec(), perm[a..b].to_vec(), perm[b..need].to_vec()];
    let train = elastic_expand(&source.subset(&idx[0]), sizes.train, elastic, &mut rng);
    let val = elastic_expand(&source.subset(&idx[1]), sizes.val, elastic, &mut rng);
    Ok(Partitions {
        train,
        val,
        online_source: source.subset(&idx[2]),
        source_indices: idx,
        online_len: sizes.online,
    })
}

/// Augmentations enabled for one block of the online stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockFlags {
    /// Class-distribution clustering.
    pub cd: bool,
    /// Spatial transforms.
    pub st: bool,
    /// Background gradients.
    pub bg: bool,
    /// White noise.
    pub wn: bool,
}

impl BlockFlags {
    pub const NONE: Self = Self {
        cd: false,
        st: false,
        bg: false,
        wn: false,
    };

    pub fn any(&self) -> bool {
        self.cd || self.st || self.bg || self.wn
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.cd, "CD"), (self.st, "ST"), (self.bg, "BG"), (self.wn, "WN")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|&(_, n)| n)
            .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

/// Ranges for the four shift augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub rotate_deg: f64,
    pub scale: (f64, f64),
    pub shift_px: f64,
    pub contrast: (f64, f64),
    pub gradient_max: f64,
    pub noise_sigma: (f64, f64),
    /// Dirichlet concentration for class clustering; smaller is peakier.
    pub cd_concentration: f64,
    /// Samples between steps of the class-probability walk.
    pub cd_period: usize,
    /// Weight of the fresh Dirichlet draw at each walk step.
    pub cd_mix: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotate_deg: 15.0,
            scale: (0.85, 1.15),
            shift_px: 2.0,
            contrast: (0.6, 1.0),
            gradient_max: 0.3,
            noise_sigma: (0.05, 0.2),
            cd_concentration: 0.2,
            cd_period: 250,
            cd_mix: 0.5,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Random rotation, scaling and shift about the image centre.
pub fn spatial_transform(img: ArrayView2<f64>, p: &AugmentParams, rng: &mut impl Rng) -> Array2<f64> {
    let theta = uniform(rng, (-p.rotate_deg, p.rotate_deg)).to_radians();
    let scale = uniform(rng, p.scale);
    let ty = uniform(rng, (-p.shift_px, p.shift_px));
    let tx = uniform(rng, (-p.shift_px, p.shift_px));
    let (h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    // Inverse map: output pixel -> source pixel.
    resample(img, |i, j| {
        let y = i as f64 - cy - ty;
        let x = j as f64 - cx - tx;
        let sy = (cos * y - sin * x) / scale;
        let sx = (sin * y + cos * x) / scale;
        (sy + cy, sx + cx)
    })
}

/// Contrast scaling around mid-grey plus a linear intensity ramp.
pub fn background_gradient(img: ArrayView2<f64>, p: &AugmentParams, rng: &mut impl Rng) -> Array2<f64> {
    let c = uniform(rng, p.contrast);
    let amp = uniform(rng, (0.0, p.gradient_max));
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let (h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let half = (cy.max(cx)).max(1.0);
    let (sin, cos) = phi.sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let ramp = amp * ((i as f64 - cy) * sin + (j as f64 - cx) * cos) / half;
        (c * img[[i, j]] + 0.5 * (1.0 - c) + ramp).clamp(0.0, 1.0)
    })
}

/// Per-pixel Gaussian noise, clipped to `[0, 1]`.
pub fn white_noise(img: ArrayView2<f64>, sigma: f64, rng: &mut impl Rng) -> Array2<f64> {
    img.mapv(|v| {
        let n: f64 = StandardNormal.sample(rng);
        (v + sigma * n).clamp(0.0, 1.0)
    })
}

/// Flags per contiguous block of the online stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSchedule {
    pub block_len: usize,
    pub blocks: Vec<BlockFlags>,
}

impl Default for ShiftSchedule {
    fn default() -> Self {
        Self::none()
    }
}

impl ShiftSchedule {
    pub fn none() -> Self {
        Self {
            block_len: 10_000,
            blocks: Vec::new(),
        }
    }

    /// Ten blocks, each with a different augmentation mix.
    pub fn distribution_shift(block_len: usize) -> Self {
        let f = |cd, st, bg, wn| BlockFlags { cd, st, bg, wn };
        Self {
            block_len,
            blocks: vec![
                f(false, true, false, false),
                f(false, false, true, false),
                f(true, false, false, false),
                f(false, false, false, true),
                f(false, true, true, false),
                f(true, false, false, true),
                f(false, true, false, true),
                f(true, true, false, false),
                f(false, false, true, true),
                f(true, true, true, true),
            ],
        }
    }

    /// Flags for sample `i`; samples past the listed blocks are un-augmented.
    pub fn flags_at(&self, i: usize) -> BlockFlags {
        if self.block_len == 0 {
            return BlockFlags::NONE;
        }
        self.blocks.get(i / self.block_len).copied().unwrap_or(BlockFlags::NONE)
    }
}

/// One online sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array2<f64>,
    pub label: u8,
    /// Index into the stream's source set.
    pub source: usize,
}

/// Lazily generated online sequence drawn with replacement from a source
/// set. Source choice, class walk and augmentation draws use separate
/// random streams, so toggling flags leaves the un-augmented sequence
/// unchanged wherever class clustering is off.
#[derive(Debug, Clone)]
pub struct OnlineStream<'a> {
    source: &'a Dataset,
    len: usize,
    schedule: ShiftSchedule,
    params: AugmentParams,
    by_class: Vec<Vec<usize>>,
    pick_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    cd_rng: ChaCha8Rng,
    class_probs: Array1<f64>,
    pos: usize,
}

impl<'a> OnlineStream<'a> {
    pub fn new(
        source: &'a Dataset,
        len: usize,
        schedule: ShiftSchedule,
        params: AugmentParams,
        seed: u64,
    ) -> Result<Self> {
        if source.is_empty() && len > 0 {
            return Err(DataError::Insufficient { need: 1, have: 0 });
        }
        if params.cd_concentration <= 0.0 || !(0.0..=1.0).contains(&params.cd_mix) {
            return Err(DataError::Config("cd_concentration must be > 0 and cd_mix in [0, 1]".into()));
        }
        let mut by_class = vec![Vec::new(); NUM_CLASSES];
        for (i, &l) in source.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let mut s = Self {
            source,
            len,
            schedule,
            params,
            by_class,
            pick_rng: rng(0),
            aug_rng: rng(1),
            cd_rng: rng(2),
            class_probs: Array1::zeros(NUM_CLASSES),
            pos: 0,
        };
        s.class_probs = s.dirichlet_draw();
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn dirichlet_draw(&mut self) -> Array1<f64> {
        let present: Vec<usize> = (0..NUM_CLASSES).filter(|&c| !self.by_class[c].is_empty()).collect();
        let mut p = Array1::zeros(NUM_CLASSES);
        match present.len() {
            0 => {}
            1 => p[present[0]] = 1.0,
            _ => {
                // Normalized Gamma draws give a symmetric Dirichlet sample.
                let g = Gamma::new(self.params.cd_concentration, 1.0).expect("validated");
                for &c in &present {
                    p[c] = g.sample(&mut self.cd_rng);
                }
                let total = p.sum();
                if total > 0.0 {
                    p /= total;
                } else {
                    p[present[0]] = 1.0;
                }
            }
        }
        p
    }

    fn pick_clustered(&mut self) -> usize {
        let period = self.params.cd_period.max(1);
        if self.pos > 0 && self.pos % period == 0 {
            let fresh = self.dirichlet_draw();
            let m = self.params.cd_mix;
            self.class_probs = &self.class_probs * (1.0 - m) + fresh * m;
        }
        let u: f64 = self.cd_rng.random();
        let mut acc = 0.0;
        let mut class = NUM_CLASSES - 1;
        for (c, &p) in self.class_probs.iter().enumerate() {
            acc += p;
            if u < acc && !self.by_class[c].is_empty() {
                class = c;
                break;
            }
        }
        while self.by_class[class].is_empty() {
            class = (class + NUM_CLASSES - 1) % NUM_CLASSES;
        }
        let members = &self.by_class[class];
        members[self.cd_rng.random_range(0..members.len())]
    }
}

impl Iterator for OnlineStream<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        if self.pos >= self.len {
            return None;
        }
        let flags = self.schedule.flags_at(self.pos);
        // The base draw is consumed every step to keep streams aligned.
        let base = self.pick_rng.random_range(0..self.source.len());
        let idx = if flags.cd { self.pick_clustered() } else { base };
        let mut img = self.source.image(idx).to_owned();
        let p = self.params;
        if flags.st {
            img = spatial_transform(img.view(), &p, &mut self.aug_rng);
        }
        if flags.bg {
            img = background_gradient(img.view(), &p, &mut self.aug_rng);
        }
        if flags.wn {
            let sigma = uniform(&mut self.aug_rng, p.noise_sigma);
            img = white_noise(img.view(), sigma, &mut self.aug_rng);
        }
        self.pos += 1;
        Some(Sample {
            image: img,
            label: self.source.labels[idx],
            source: idx,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.len - self.pos;
        (n, Some(n))
    }
}

/// Shannon entropy (nats) of the label histogram.
pub fn label_entropy(labels: &[u8]) -> f64 {
    let mut counts = [0usize; NUM_CLASSES];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

// Segments a..g on a unit box: (y0, x0, y1, x1).
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (0.0, 0.0, 0.0, 1.0), // a top
    (0.0, 1.0, 0.5, 1.0), // b upper right
    (0.5, 1.0, 1.0, 1.0), // c lower right
    (1.0, 0.0, 1.0, 1.0), // d bottom
    (0.5, 0.0, 1.0, 0.0), // e lower left
    (0.0, 0.0, 0.5, 0.0), // f upper left
    (0.5, 0.0, 0.5, 1.0), // g middle
];

const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111, 0b1111111,
    0b1101111,
];

fn segment_distance(py: f64, px: f64, (y0, x0, y1, x1): (f64, f64, f64, f64)) -> f64 {
    let (dy, dx) = (y1 - y0, x1 - x0);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((py - y0) * dy + (px - x0) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ey, ex) = (py - (y0 + t * dy), px - (x0 + t * dx));
    (ey * ey + ex * ex).sqrt()
}

fn render_digit(class: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = DIGIT_SIDE as f64;
    let height = rng.random_range(0.55..0.75) * n;
    let width = height * rng.random_range(0.45..0.65);
    let cy = n / 2.0 + rng.random_range(-1.5..1.5);
    let cx = n / 2.0 + rng.random_range(-1.5..1.5);
    let slant = rng.random_range(-0.25..0.25);
    let thick = rng.random_range(1.2..2.2);
    let ink = rng.random_range(0.75..1.0);
    let mask = DIGIT_SEGMENTS[class];
    Array2::from_shape_fn((DIGIT_SIDE, DIGIT_SIDE), |(i, j)| {
        let v = (i as f64 + 0.5 - (cy - height / 2.0)) / height;
        let u = (j as f64 + 0.5 - (cx - width / 2.0) + slant * (i as f64 - cy)) / width;
        let mut best = f64::INFINITY;
        for (k, seg) in SEGMENTS.iter().enumerate() {
            if mask & (1 << k) != 0 {
                // Distances in pixels, measured in the glyph's scaled frame.
                let (y0, x0, y1, x1) = *seg;
                let d = segment_distance(v * height, u * width, (y0 * height, x0 * width, y1 * height, x1 * width));
                best = best.min(d);
            }
        }
        let soft = (thick + 0.5 - best).clamp(0.0, 1.0);
        ink * soft
    })
}

/// Seven-segment style digits with exactly balanced classes (up to `n % 10`).
pub fn synthetic_digits(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
    labels.shuffle(&mut rng);
    let mut images = Array3::zeros((n, DIGIT_SIDE, DIGIT_SIDE));
    for (k, &l) in labels.iter().enumerate() {
        let mut img = render_digit(l as usize, &mut rng);
        // A mild elastic wobble so that glyphs of one class are not rigid copies.
        img = elastic_transform(
            img.view(),
            ElasticParams {
                alpha: 2.0,
                sigma: 3.0,
            },
            rng.next_u64(),
        );
        images.slice_mut(s![k, .., ..]).assign(&img);
    }
    Dataset { images, labels }
}

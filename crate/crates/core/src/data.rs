//! Paired datasets, synthetic motion blur and augmentation.
//!
//! Every per-sample transform draws from a random stream derived from
//! `(seed, epoch, sample index)`, so an epoch's batches are a pure function of
//! those values no matter how or in which order they are produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{is_image_path, load_image};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Nonnegative blur kernel whose taps sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    /// Row-major `size x size` taps.
    pub taps: Vec<Real>,
    pub size: usize,
    /// `(row, col)` of the tap aligned with the output pixel.
    pub anchor: (usize, usize),
}

impl BlurKernel {
    pub fn identity() -> Self {
        BlurKernel {
            taps: vec![1.0],
            size: 1,
            anchor: (0, 0),
        }
    }

    /// Uniform `size x size` box filter.
    pub fn box_filter(size: usize) -> Self {
        let n = (size * size) as Real;
        BlurKernel {
            taps: vec![1.0 / n; size * size],
            size,
            anchor: (size / 2, size / 2),
        }
    }

    pub fn from_taps(taps: Vec<Real>, size: usize) -> Result<Self> {
        if taps.len() != size * size || size == 0 {
            return Err(Error::dim(format!(
                "kernel of side {size} needs {} taps, got {}",
                size * size,
                taps.len()
            )));
        }
        if taps.iter().any(|&t| t.is_nan() || t < 0.0) {
            return Err(Error::config("kernel taps must be nonnegative"));
        }
        let sum: Real = taps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("kernel taps sum to {sum}, not 1")));
        }
        Ok(BlurKernel {
            taps,
            size,
            anchor: (size / 2, size / 2),
        })
    }

    pub fn tap(&self, row: usize, col: usize) -> Real {
        self.taps[row * self.size + col]
    }

    /// Bounding box `(rows, cols)` of the nonzero taps.
    pub fn support(&self) -> (usize, usize) {
        let nz = |i: usize| self.taps[i] > 0.0;
        let rows: Vec<usize> = (0..self.size)
            .filter(|&r| (0..self.size).any(|c| nz(r * self.size + c)))
            .collect();
        let cols: Vec<usize> = (0..self.size)
            .filter(|&c| (0..self.size).any(|r| nz(r * self.size + c)))
            .collect();
        match (rows.first(), rows.last(), cols.first(), cols.last()) {
            (Some(r0), Some(r1), Some(c0), Some(c1)) => (r1 - r0 + 1, c1 - c0 + 1),
            _ => (0, 0),
        }
    }
}

/// Random camera-shake kernel: a random-walk trajectory of arc length
/// `length` pixels, rasterized by bilinear splatting and normalized.
///
/// The walk keeps a unit heading that drifts with Gaussian noise and
/// occasionally jerks, as in shaky hand-held capture. Lengths up to one
/// pixel give the identity kernel.
pub fn random_motion_kernel<R: Rng + ?Sized>(length: Real, rng: &mut R) -> Result<BlurKernel> {
    if !length.is_finite() || length < 1.0 {
        return Err(Error::config(format!(
            "kernel length must be >= 1, got {length}"
        )));
    }
    if length <= 1.0 {
        return Ok(BlurKernel::identity());
    }
    const SAMPLES: usize = 96;
    const DRIFT: Real = 0.25;
    const JERK_PROB: Real = 0.02;
    let step = length / (SAMPLES - 1) as Real;
    let drift = Normal::new(0.0, DRIFT).expect("valid std");
    let mut heading: Real = rng.random_range(0.0..std::f64::consts::TAU);
    let mut points = Vec::with_capacity(SAMPLES);
    let (mut x, mut y) = (0.0, 0.0);
    points.push((x, y));
    for _ in 1..SAMPLES {
        heading += drift.sample(rng);
        if rng.random::<Real>() < JERK_PROB {
            heading += rng.random_range(-1.5..1.5);
        }
        x += step * heading.cos();
        y += step * heading.sin();
        points.push((x, y));
    }
    let (min_x, max_x) = points
        .iter()
        .fold((Real::MAX, Real::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_y, max_y) = points
        .iter()
        .fold((Real::MAX, Real::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    // Pin each axis minimum to a pixel centre: bilinear splats then touch at
    // most ceil(extent) + 1 pixels per axis.
    let size = 2 * (length / 2.0).ceil() as usize + 3;
    let c = (size / 2) as Real;
    let base_x = c - ((max_x - min_x) / 2.0).floor();
    let base_y = c - ((max_y - min_y) / 2.0).floor();
    let mut taps = vec![0.0; size * size];
    for &(px, py) in &points {
        let (fx, fy) = (base_x + (px - min_x), base_y + (py - min_y));
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - x0, fy - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
            for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                let wgt = wx * wy;
                if wgt > 0.0 {
                    taps[(y0 + dy) * size + x0 + dx] += wgt;
                }
            }
        }
    }
    // Strip empty outer rings so the anchor stays central.
    let mut size = size;
    while size > 1 {
        let ring_empty = (0..size).all(|i| {
            taps[i] == 0.0
                && taps[(size - 1) * size + i] == 0.0
                && taps[i * size] == 0.0
                && taps[i * size + size - 1] == 0.0
        });
        if !ring_empty {
            break;
        }
        taps = (1..size - 1)
            .flat_map(|r| taps[r * size + 1..r * size + size - 1].to_vec())
            .collect();
        size -= 2;
    }
    let sum: Real = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(BlurKernel {
        taps,
        size,
        anchor: (size / 2, size / 2),
    })
}

/// Per-channel 2-D convolution with edge replication.
pub fn apply_blur(sharp: &Tensor, kernel: &BlurKernel) -> Result<Tensor> {
    let (n, c, h, w) = sharp.dims4()?;
    if kernel.size > h || kernel.size > w {
        return Err(Error::dim(format!(
            "{0}x{0} kernel is larger than the {h}x{w} image",
            kernel.size
        )));
    }
    let (ay, ax) = (kernel.anchor.0 as isize, kernel.anchor.1 as isize);
    let taps: Vec<(isize, isize, Real)> = (0..kernel.size)
        .flat_map(|i| (0..kernel.size).map(move |j| (i, j)))
        .map(|(i, j)| (i as isize - ay, j as isize - ax, kernel.tap(i, j)))
        .filter(|t| t.2 != 0.0)
        .collect();
    let src = sharp.data();
    let mut out = vec![0.0; src.len()];
    for plane_idx in 0..n * c {
        let plane = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut out[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for &(dy, dx, t) in &taps {
                    let yy = (y - dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x - dx).clamp(0, w as isize - 1) as usize;
                    acc += t * plane[yy * w + xx];
                }
                dst[y as usize * w + x as usize] = acc;
            }
        }
    }
    Tensor::new(sharp.shape().to_vec(), out)
}

/// Adds i.i.d. `N(0, variance)` noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    image: &Tensor,
    variance: Real,
    rng: &mut R,
) -> Result<Tensor> {
    if variance.is_nan() || variance < 0.0 {
        return Err(Error::config(format!(
            "noise variance must be >= 0, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("valid std");
    let data = image
        .data()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// `factor x factor` box average; trailing rows/cols that do not fill a
/// box are dropped.
pub fn downsample(image: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::config("downsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (n, c, h, w) = image.dims4()?;
    let (oh, ow) = (h / factor, w / factor);
    if oh == 0 || ow == 0 {
        return Err(Error::dim(format!(
            "{h}x{w} image is too small to downsample by {factor}"
        )));
    }
    let norm = (factor * factor) as Real;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += image.at4(b, ch, y * factor + dy, x * factor + dx);
                        }
                    }
                    out.push(s / norm);
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn downsample2(image: &Tensor) -> Result<Tensor> {
    downsample(image, 2)
}

/// How a pair was derived from its source images.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    /// `(row, col)` of the crop in the downsampled source.
    pub crop_offset: (usize, usize),
    pub noise_seed: Option<u64>,
    /// Seed of the synthetic blur kernel, when the blur was synthesized.
    pub kernel_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub blurry: Tensor,
    pub sharp: Tensor,
    pub id: String,
    pub record: AugmentationRecord,
}

impl ImagePair {
    pub fn new(blurry: Tensor, sharp: Tensor, id: impl Into<String>) -> Result<Self> {
        blurry.expect_same_shape(&sharp, "image pair")?;
        Ok(ImagePair {
            blurry,
            sharp,
            id: id.into(),
            record: AugmentationRecord::default(),
        })
    }
}

/// Crops blurry and sharp at one shared random offset.
pub fn random_crop_pair<R: Rng + ?Sized>(
    pair: &ImagePair,
    size: usize,
    rng: &mut R,
) -> Result<ImagePair> {
    let (_, _, h, w) = pair.sharp.dims4()?;
    if h < size || w < size {
        return Err(Error::Data(format!(
            "image `{}` is {h}x{w}, smaller than the {size}x{size} crop",
            pair.id
        )));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let mut out = ImagePair {
        blurry: crate::networks::crop(&pair.blurry, top, left, size, size)?,
        sharp: crate::networks::crop(&pair.sharp, top, left, size, size)?,
        id: pair.id.clone(),
        record: pair.record.clone(),
    };
    out.record.crop_offset = (top, left);
    Ok(out)
}

/// A random test card: a dark background with colored rectangles, discs and
/// strokes. Most colors have at least one channel near zero, like natural
/// sharp images, so the dark channel is sparse.
pub fn synthetic_sharp_image<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Tensor {
    let color = |rng: &mut R| -> [Real; 3] {
        let mut c = [
            rng.random::<Real>(),
            rng.random::<Real>(),
            rng.random::<Real>(),
        ];
        if rng.random::<Real>() < 0.75 {
            c[rng.random_range(0..3)] = 0.0;
        }
        c
    };
    let bg = color(rng);
    let mut data = vec![0.0; 3 * height * width];
    for ch in 0..3 {
        let gy: Real = rng.random_range(-0.1..0.1);
        for y in 0..height {
            for x in 0..width {
                let v = bg[ch] * 0.4 + gy * y as Real / height as Real;
                data[(ch * height + y) * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let shapes = rng.random_range(6..14);
    for _ in 0..shapes {
        let c = color(rng);
        let kind = rng.random_range(0..3);
        let cy = rng.random_range(0.0..height as Real);
        let cx = rng.random_range(0.0..width as Real);
        let ry = rng.random_range(2.0..(height as Real / 4.0).max(3.0));
        let rx = rng.random_range(2.0..(width as Real / 4.0).max(3.0));
        let angle: Real = rng.random_range(0.0..std::f64::consts::PI);
        let (sa, ca) = angle.sin_cos();
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as Real - cy, x as Real - cx);
                let inside = match kind {
                    0 => dy.abs() <= ry && dx.abs() <= rx,
                    1 => (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0,
                    _ => (dx * sa - dy * ca).abs() <= 1.0 && (dx * ca + dy * sa).abs() <= rx,
                };
                if inside {
                    for ch in 0..3 {
                        data[(ch * height + y) * width + x] = c[ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![1, 3, height, width], data).expect("shape matches")
}

/// Per-sample augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub crop: usize,
    pub downsample_factor: usize,
    pub noise_variance: Real,
    /// Arc length of synthesized blur, for sharp-only datasets.
    pub kernel_length: Real,
    pub batch: usize,
    pub seed: u64,
}

/// Stacked, aligned minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(n, 3, crop, crop)` in `[0, 1]`.
    pub blurry: Tensor,
    pub sharp: Tensor,
    pub ids: Vec<String>,
    pub records: Vec<AugmentationRecord>,
}

#[derive(Clone, Debug)]
struct Entry {
    id: String,
    sharp: Tensor,
    blurry: Option<Tensor>,
}

/// Images under `<root>/sharp/` with optional matching `<root>/blur/`
/// counterparts (same file name). Without `blur/`, blur is synthesized.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub root: PathBuf,
    entries: Vec<Entry>,
    /// `(file name, reason)` for images that could not be read.
    pub skipped: Vec<(String, String)>,
}

fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image_path(p))
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .collect();
    names.sort();
    Ok(names)
}

impl PairedDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let sharp_dir = root.join("sharp");
        let blur_dir = root.join("blur");
        if !sharp_dir.is_dir() {
            return Err(Error::Data(format!(
                "{} has no sharp/ directory",
                root.display()
            )));
        }
        let sharp_names = list_images(&sharp_dir)?;
        let blur_names = if blur_dir.is_dir() {
            let names = list_images(&blur_dir)?;
            if names != sharp_names {
                return Err(Error::Data(format!(
                    "blur/ and sharp/ file names do not match\n  blur:  {names:?}\n  sharp: {sharp_names:?}"
                )));
            }
            Some(names)
        } else {
            None
        };
        let mut entries = Vec::new();
        let mut skipped = Vec::new();
        for name in &sharp_names {
            let loaded = load_image(&sharp_dir.join(name)).and_then(|sharp| {
                let blurry = match blur_names {
                    Some(_) => {
                        let b = load_image(&blur_dir.join(name))?;
                        b.expect_same_shape(&sharp, name)?;
                        Some(b)
                    }
                    None => None,
                };
                Ok((sharp, blurry))
            });
            match loaded {
                Ok((sharp, blurry)) => entries.push(Entry {
                    id: name.clone(),
                    sharp,
                    blurry,
                }),
                Err(e) => {
                    log::warn!("skipping {name}: {e}");
                    skipped.push((name.clone(), e.to_string()));
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::Data(format!(
                "{} holds no readable image pairs ({} skipped)",
                root.display(),
                skipped.len()
            )));
        }
        Ok(PairedDataset {
            root: root.to_path_buf(),
            entries,
            skipped,
        })
    }

    /// In-memory dataset of aligned pairs.
    pub fn from_pairs(pairs: Vec<ImagePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let mut seen = BTreeMap::new();
        let mut entries = Vec::with_capacity(pairs.len());
        for p in pairs {
            if seen.insert(p.id.clone(), ()).is_some() {
                return Err(Error::Data(format!("duplicate image id `{}`", p.id)));
            }
            p.blurry.expect_same_shape(&p.sharp, &p.id)?;
            entries.push(Entry {
                id: p.id,
                sharp: p.sharp,
                blurry: Some(p.blurry),
            });
        }
        Ok(PairedDataset {
            root: PathBuf::new(),
            entries,
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Full-resolution pair `index`, synthesizing blur with a kernel keyed by
    /// `(seed, index)` when the dataset is sharp-only.
    pub fn pair(&self, index: usize, kernel_length: Real, seed: u64) -> Result<ImagePair> {
        let e = &self.entries[index];
        match &e.blurry {
            Some(b) => ImagePair::new(b.clone(), e.sharp.clone(), &e.id),
            None => {
                let kseed = rng::derive_seed(seed, "kernel", &[index as u64]);
                let kernel = random_motion_kernel(kernel_length, &mut rng::seeded(kseed))?;
                let mut p = ImagePair::new(apply_blur(&e.sharp, &kernel)?, e.sharp.clone(), &e.id)?;
                p.record.kernel_seed = Some(kseed);
                Ok(p)
            }
        }
    }

    /// Sample order for an epoch.
    pub fn order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, "shuffle", &[epoch]));
        order
    }

    /// Augmented sample `index` for `epoch`: optional synthetic blur,
    /// downsampling, a shared random crop, then noise on the blurry member.
    pub fn sample(&self, index: usize, cfg: &PipelineConfig, epoch: u64) -> Result<ImagePair> {
        let pair = self.pair(index, cfg.kernel_length, cfg.seed)?;
        let mut pair = ImagePair {
            blurry: downsample(&pair.blurry, cfg.downsample_factor)?,
            sharp: downsample(&pair.sharp, cfg.downsample_factor)?,
            ..pair
        };
        let mut r = rng::stream(cfg.seed, "crop", &[epoch, index as u64]);
        pair = random_crop_pair(&pair, cfg.crop, &mut r)?;
        if cfg.noise_variance > 0.0 {
            let nseed = rng::derive_seed(cfg.seed, "noise", &[epoch, index as u64]);
            pair.blurry =
                add_gaussian_noise(&pair.blurry, cfg.noise_variance, &mut rng::seeded(nseed))?;
            pair.record.noise_seed = Some(nseed);
        }
        Ok(pair)
    }

    /// All full batches of one epoch; the ragged tail is dropped. Samples
    /// that fail are skipped with a warning. Returns the batches and the
    /// skip count, or an error when every sample failed.
    pub fn epoch(&self, cfg: &PipelineConfig, epoch: u64) -> Result<(Vec<Batch>, usize)> {
        if cfg.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        let mut pending = Vec::with_capacity(cfg.batch);
        let mut batches = Vec::new();
        let mut skipped = 0;
        for idx in self.order(cfg.seed, epoch) {
            match self.sample(idx, cfg, epoch) {
                Ok(p) => pending.push(p),
                Err(e) => {
                    log::warn!("epoch {epoch}: skipping `{}`: {e}", self.entries[idx].id);
                    skipped += 1;
                    continue;
                }
            }
            if pending.len() == cfg.batch {
                batches.push(make_batch(std::mem::take(&mut pending))?);
            }
        }
        if skipped == self.len() {
            return Err(Error::Data(format!(
                "every sample failed in epoch {epoch} ({skipped} skipped)"
            )));
        }
        Ok((batches, skipped))
    }
}

pub fn make_batch(pairs: Vec<ImagePair>) -> Result<Batch> {
    let blurry: Vec<Tensor> = pairs.iter().map(|p| p.blurry.clone()).collect();
    let sharp: Vec<Tensor> = pairs.iter().map(|p| p.sharp.clone()).collect();
    Ok(Batch {
        blurry: Tensor::stack_batch(&blurry)?,
        sharp: Tensor::stack_batch(&sharp)?,
        ids: pairs.iter().map(|p| p.id.clone()).collect(),
        records: pairs.into_iter().map(|p| p.record).collect(),
    })
}

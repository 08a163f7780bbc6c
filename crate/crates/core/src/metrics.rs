//! PSNR, SSIM and dataset evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::data::{add_gaussian_noise, downsample, PairedDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Reported for identical images, and the ceiling for any PSNR.
pub const PSNR_CAP: Real = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: Real = 1.5;
const K1: Real = 0.01;
const K2: Real = 0.03;

/// Peak signal-to-noise ratio in dB with peak 1.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Real> {
    a.expect_same_shape(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        / a.len() as Real;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_taps() -> [Real; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = (i as isize - r) as Real;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: Real = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(plane: &[Real], h: usize, w: usize, taps: &[Real; SSIM_WINDOW]) -> Vec<Real> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + x + k])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), data range
/// 1, population statistics, averaged over valid positions, channels and
/// batch items.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Real> {
    a.expect_same_shape(b, "ssim")?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let (c1, c2) = ((K1 * K1), (K2 * K2));
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let x = &a.data()[p * plane..(p + 1) * plane];
        let y = &b.data()[p * plane..(p + 1) * plane];
        let prod = |f: &dyn Fn(Real, Real) -> Real| -> Vec<Real> {
            x.iter().zip(y).map(|(&u, &v)| f(u, v)).collect()
        };
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let mxx = filter_valid(&prod(&|u, _| u * u), h, w, &taps);
        let myy = filter_valid(&prod(&|_, v| v * v), h, w, &taps);
        let mxy = filter_valid(&prod(&|u, v| u * v), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as Real;
    }
    Ok(total / (n * c) as Real)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: Real,
    pub ssim: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub downsample_factor: usize,
    pub noise_variance: Real,
    pub kernel_length: Real,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            downsample_factor: 2,
            noise_variance: 0.0,
            kernel_length: 9.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset: String,
    pub options: EvalOptions,
    pub per_image: Vec<ImageScore>,
    /// `(id, message)` of images that failed.
    pub failures: Vec<(String, String)>,
    pub mean_psnr: Real,
    pub mean_ssim: Real,
}

/// Scores `restore(blurry)` against the sharp image for every pair.
/// Test images are downsampled and optionally noised with a stream keyed by
/// `(seed, index)`. Per-image failures are recorded; an empty result is an
/// error.
pub fn evaluate_with<F>(
    dataset: &PairedDataset,
    options: &EvalOptions,
    checkpoint: &str,
    mut restore: F,
) -> Result<EvalReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut per_image = Vec::new();
    let mut failures = Vec::new();
    for (index, id) in dataset.ids().enumerate() {
        let scored = (|| {
            let pair = dataset.pair(index, options.kernel_length, options.seed)?;
            let sharp = downsample(&pair.sharp, options.downsample_factor)?;
            let mut blurry = downsample(&pair.blurry, options.downsample_factor)?;
            if options.noise_variance > 0.0 {
                let mut r = rng::stream(options.seed, "eval-noise", &[index as u64]);
                blurry = add_gaussian_noise(&blurry, options.noise_variance, &mut r)?;
            }
            let restored = restore(&blurry)?;
            Ok::<_, Error>(ImageScore {
                id: id.to_string(),
                psnr: psnr(&restored, &sharp)?,
                ssim: ssim(&restored, &sharp)?,
            })
        })();
        match scored {
            Ok(s) => per_image.push(s),
            Err(e) => {
                log::warn!("evaluation of `{id}` failed: {e}");
                failures.push((id.to_string(), e.to_string()));
            }
        }
    }
    if per_image.is_empty() {
        return Err(Error::Data(format!(
            "no image could be evaluated ({} failures)",
            failures.len()
        )));
    }
    let count = per_image.len() as Real;
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        dataset: dataset.root.display().to_string(),
        options: options.clone(),
        mean_psnr: per_image.iter().map(|s| s.psnr).sum::<Real>() / count,
        mean_ssim: per_image.iter().map(|s| s.ssim).sum::<Real>() / count,
        per_image,
        failures,
    })
}

/// Evaluates the generator stored in a checkpoint file.
pub fn evaluate(
    checkpoint: &Path,
    dataset: &PairedDataset,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let mut ckpt = load_checkpoint(checkpoint, None)?;
    evaluate_with(dataset, options, &checkpoint.display().to_string(), |b| {
        ckpt.generator.restore(b)
    })
}

/// One evaluated cell group of the comparison table.
#[derive(Clone, Debug)]
pub struct TableEntry<'a> {
    /// Row group, e.g. the dataset condition.
    pub dataset: String,
    /// Column, e.g. the model variant.
    pub model: String,
    pub report: &'a EvalReport,
}

/// Plain-text table with one column per model and PSNR/SSIM rows per
/// dataset, in first-seen order.
pub fn format_table(entries: &[TableEntry<'_>]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for e in entries {
        if !datasets.contains(&e.dataset.as_str()) {
            datasets.push(&e.dataset);
        }
        if !models.contains(&e.model.as_str()) {
            models.push(&e.model);
        }
    }
    let find = |d: &str, m: &str| entries.iter().find(|e| e.dataset == d && e.model == m);
    let dw = datasets
        .iter()
        .map(|d| d.len())
        .max()
        .unwrap_or(0)
        .max("Dataset".len());
    let cw = models.iter().map(|m| m.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = write!(out, "{:<dw$} | {:<7}", "Dataset", "Metrics");
    for m in &models {
        let _ = write!(out, " | {m:>cw$}");
    }
    out.push('\n');
    let rule = dw + 10 + models.len() * (cw + 3);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for d in &datasets {
        for (i, metric) in ["PSNR", "SSIM"].iter().enumerate() {
            let label = if i == 0 { *d } else { "" };
            let _ = write!(out, "{label:<dw$} | {metric:<7}");
            for m in &models {
                let cell = match find(d, m) {
                    Some(e) if i == 0 => format!("{:.2}", e.report.mean_psnr),
                    Some(e) => format!("{:.4}", e.report.mean_ssim),
                    None => "-".to_string(),
                };
                let _ = write!(out, " | {cell:>cw$}");
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImagePair;

    #[test]
    fn psnr_examples() {
        let z = Tensor::zeros(&[1, 3, 4, 4]);
        let o = Tensor::ones(&[1, 3, 4, 4]);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&z, &Tensor::zeros(&[1, 3, 4, 5])).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let mut r = rng::seeded(1);
        let a = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
        let b = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(
            &Tensor::zeros(&[1, 3, 10, 10]),
            &Tensor::zeros(&[1, 3, 10, 10])
        )
        .is_err());
    }

    #[test]
    fn identity_restorer_on_identity_dataset() {
        let mut r = rng::seeded(2);
        let pairs = (0..3)
            .map(|i| {
                let s = Tensor::uniform(&[1, 3, 24, 24], 0.0, 1.0, &mut r);
                ImagePair::new(s.clone(), s, format!("p{i}")).unwrap()
            })
            .collect();
        let ds = PairedDataset::from_pairs(pairs).unwrap();
        let report =
            evaluate_with(&ds, &EvalOptions::default(), "identity", |b| Ok(b.clone())).unwrap();
        assert_eq!(report.mean_psnr, PSNR_CAP);
        assert!((report.mean_ssim - 1.0).abs() < 1e-9);
        assert_eq!(report.per_image.len(), 3);
    }

    #[test]
    fn failures_are_recorded() {
        let mut r = rng::seeded(3);
        let s = Tensor::uniform(&[1, 3, 24, 24], 0.0, 1.0, &mut r);
        let small = Tensor::uniform(&[1, 3, 12, 12], 0.0, 1.0, &mut r);
        let ds = PairedDataset::from_pairs(vec![
            ImagePair::new(s.clone(), s, "big").unwrap(),
            ImagePair::new(small.clone(), small, "small").unwrap(),
        ])
        .unwrap();
        let report = evaluate_with(&ds, &EvalOptions::default(), "id", |b| Ok(b.clone())).unwrap();
        assert_eq!(report.per_image.len(), 1);
        assert_eq!(report.failures[0].0, "small");
    }

    #[test]
    fn table_layout() {
        let report = EvalReport {
            checkpoint: String::new(),
            dataset: String::new(),
            options: EvalOptions::default(),
            per_image: vec![],
            failures: vec![],
            mean_psnr: 27.01,
            mean_ssim: 0.8813,
        };
        let entries: Vec<TableEntry> = ["Original", "Noisy"]
            .iter()
            .flat_map(|d| {
                ["dc0", "dc250"].map(|m| TableEntry {
                    dataset: d.to_string(),
                    model: m.to_string(),
                    report: &report,
                })
            })
            .collect();
        let t = format_table(&entries);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0].split('|').count(), 4);
        assert!(lines[2].contains("27.01") && lines[3].contains("0.8813"));
    }
}

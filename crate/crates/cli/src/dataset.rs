use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use dcdeblur::data::{add_gaussian_noise, apply_blur, random_motion_kernel, synthetic_sharp_image};
use dcdeblur::imageio::{is_image_path, load_image, save_image};
use dcdeblur::{rng, Error, Real, Tensor};
use serde::Serialize;

#[derive(clap::Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["sharp_dir", "synthetic"])))]
pub struct Args {
    /// Directory of sharp source images, used in sorted order and cycled.
    #[arg(long)]
    sharp_dir: Option<PathBuf>,
    /// Draw synthetic sharp images of this side length instead.
    #[arg(long, value_name = "SIDE")]
    synthetic: Option<usize>,
    /// Output root; `blur/`, `sharp/` and `manifest.json` are written here.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Motion blur arc length in pixels.
    #[arg(long, default_value_t = 9.0)]
    kernel_length: Real,
    /// Gaussian noise variance added to the blurred images.
    #[arg(long, default_value_t = 0.0)]
    noise_variance: Real,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct KernelRecord {
    size: usize,
    taps: Vec<Real>,
}

#[derive(Serialize)]
struct PairRecord {
    file: String,
    source: String,
    kernel_seed: u64,
    kernel: KernelRecord,
    noise_seed: Option<u64>,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    kernel_length: Real,
    noise_variance: Real,
    pairs: Vec<PairRecord>,
}

fn sources(args: &Args) -> anyhow::Result<Vec<(String, Tensor)>> {
    if let Some(side) = args.synthetic {
        if side == 0 {
            return Err(Error::Config("--synthetic must be >= 1".into()).into());
        }
        return Ok((0..args.count)
            .map(|i| {
                let img = synthetic_sharp_image(
                    side,
                    side,
                    &mut rng::stream(args.seed, "synthetic", &[i as u64]),
                );
                (format!("synthetic:{i}"), img)
            })
            .collect());
    }
    let dir = args.sharp_dir.as_ref().expect("clap requires a source");
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{} contains no images", dir.display())).into());
    }
    paths
        .iter()
        .map(|p| {
            let img = load_image(p)?;
            Ok((p.display().to_string(), img))
        })
        .collect()
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if args.count == 0 {
        return Err(Error::Config("--count must be >= 1".into()).into());
    }
    if args.noise_variance.is_nan() || args.noise_variance < 0.0 {
        return Err(Error::Config(format!(
            "--noise-variance must be >= 0, got {}",
            args.noise_variance
        ))
        .into());
    }
    let sources = sources(&args)?;
    let (blur_dir, sharp_dir) = (args.out.join("blur"), args.out.join("sharp"));
    crate::ensure_dir(&blur_dir)?;
    crate::ensure_dir(&sharp_dir)?;
    let mut pairs = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let (source, sharp) = &sources[i % sources.len()];
        let kernel_seed = rng::derive_seed(args.seed, "kernel", &[i as u64]);
        let kernel = random_motion_kernel(args.kernel_length, &mut rng::seeded(kernel_seed))?;
        let mut blurry =
            apply_blur(sharp, &kernel).with_context(|| format!("blurring {source}"))?;
        let noise_seed =
            (args.noise_variance > 0.0).then(|| rng::derive_seed(args.seed, "noise", &[i as u64]));
        if let Some(s) = noise_seed {
            blurry = add_gaussian_noise(&blurry, args.noise_variance, &mut rng::seeded(s))?;
        }
        let file = format!("{i:05}.png");
        save_image(&blurry, &blur_dir.join(&file))?;
        save_image(sharp, &sharp_dir.join(&file))?;
        pairs.push(PairRecord {
            file,
            source: source.clone(),
            kernel_seed,
            kernel: KernelRecord {
                size: kernel.size,
                taps: kernel.taps.clone(),
            },
            noise_seed,
        });
    }
    let manifest = Manifest {
        seed: args.seed,
        kernel_length: args.kernel_length,
        noise_variance: args.noise_variance,
        pairs,
    };
    let path = args.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    log::info!("wrote {} pairs to {}", args.count, args.out.display());
    Ok(())
}

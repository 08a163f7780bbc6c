use std::fs;
use std::path::{Path, PathBuf};

use dcdeblur::checkpoint::load_checkpoint;
use dcdeblur::imageio::{is_image_path, load_image, save_image};
use dcdeblur::networks::Network;
use dcdeblur::Error;

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file, or output directory when `--in` is a directory.
    #[arg(long)]
    out: PathBuf,
}

fn deblur_file(generator: &mut Network, input: &Path, output: &Path) -> dcdeblur::Result<()> {
    let blurry = load_image(input)?;
    let restored = generator.restore(&blurry)?;
    save_image(&restored, output)
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let mut ckpt = load_checkpoint(&args.checkpoint, None)?;
    let generator = &mut ckpt.generator;
    if !args.input.is_dir() {
        deblur_file(generator, &args.input, &args.out)?;
        log::info!("wrote {}", args.out.display());
        return Ok(());
    }
    let mut inputs: Vec<PathBuf> = fs::read_dir(&args.input)
        .map_err(|e| Error::Io {
            path: args.input.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::Data(format!("{} contains no images", args.input.display())).into());
    }
    crate::ensure_dir(&args.out)?;
    let mut failed = 0;
    for input in &inputs {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let output = args.out.join(format!("{stem}.png"));
        match deblur_file(generator, input, &output) {
            Ok(()) => log::info!("wrote {}", output.display()),
            Err(e) => {
                log::error!("{}: {e}", input.display());
                failed += 1;
            }
        }
    }
    if failed == inputs.len() {
        return Err(Error::Data(format!("all {failed} images failed")).into());
    }
    if failed > 0 {
        log::warn!("{failed} of {} images failed", inputs.len());
    }
    Ok(())
}

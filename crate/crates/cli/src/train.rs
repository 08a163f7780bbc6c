use std::fs::{self, OpenOptions};
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use dcdeblur::checkpoint::{load_checkpoint, ExpectedSpecs};
use dcdeblur::config::TrainConfig;
use dcdeblur::data::PairedDataset;
use dcdeblur::training::{train_loop, Trainer, LOG_FILE};
use dcdeblur::Error;

use crate::overrides::Overrides;

#[derive(clap::Args, Debug)]
#[command(after_help = key_list())]
pub struct Args {
    /// `key=value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root with `sharp/` and optionally `blur/`.
    #[arg(long, required_unless_present = "dump_config")]
    data: Option<PathBuf>,
    /// Directory for checkpoints and the step log.
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(flatten)]
    overrides: Overrides,
}

fn key_list() -> String {
    let mut s = String::from("Config file keys (key=value, one per line, # comments):\n");
    for (key, help) in dcdeblur::config::KEYS {
        s.push_str(&format!("  {key:<22} {help}\n"));
    }
    s
}

fn load_config(args: &Args) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
    }
    args.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let cfg = load_config(&args)?;
    if args.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let (data, out) = (args.data.expect("required"), args.out.expect("required"));
    let dataset = PairedDataset::open(&data)?;
    log::info!("{} pairs in {}", dataset.len(), data.display());
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(
                path,
                Some(ExpectedSpecs {
                    generator: &cfg.generator,
                    discriminator: &cfg.discriminator,
                    input_size: cfg.crop,
                }),
            )?;
            log::info!("resuming at iteration {}", ckpt.iteration);
            Trainer::from_checkpoint(cfg.clone(), ckpt)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    crate::ensure_dir(&out)?;
    fs::write(out.join("config.txt"), cfg.dump()).map_err(|e| Error::Io {
        path: out.join("config.txt"),
        source: e,
    })?;
    let log_path = out.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    let mut log = BufWriter::new(file);

    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("no interrupt handler: {e}");
    }
    let outcome = train_loop(&mut trainer, &dataset, &out, &mut log, Some(&stop))?;
    if outcome.interrupted {
        log::warn!("interrupted after {} steps", outcome.steps);
    }
    if outcome.skipped > 0 {
        log::warn!("{} samples skipped", outcome.skipped);
    }
    log::info!(
        "{} steps, iteration {}, checkpoint {}",
        outcome.steps,
        trainer.iteration,
        outcome.checkpoint.display()
    );
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};

use dcdeblur::checkpoint::load_checkpoint;
use dcdeblur::data::PairedDataset;
use dcdeblur::metrics::{evaluate_with, format_table, EvalOptions, EvalReport, TableEntry};
use dcdeblur::{Error, Real};
use serde::{Deserialize, Serialize};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// `label=path` or a bare path labelled by its file stem; repeatable,
    /// one table column each.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    /// Dataset root with `sharp/` and optionally `blur/`.
    #[arg(long)]
    data: PathBuf,
    /// Noise added to the blurry inputs; repeatable, one row group each.
    #[arg(long = "noise-variance", default_values_t = [0.0])]
    noise_variances: Vec<Real>,
    /// Write every row and per-image score as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    downsample_factor: usize,
    /// Synthetic blur length for sharp-only datasets.
    #[arg(long, default_value_t = 9.0)]
    kernel_length: Real,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub report: EvalReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub table: String,
    pub rows: Vec<ReportRow>,
}

fn parse_checkpoint(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let label = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(arg)
                .to_string();
            (label, path)
        }
    }
}

fn condition_label(variance: Real, variances: &[Real]) -> String {
    let noisy = variances.iter().filter(|&&v| v > 0.0).count();
    match (variance > 0.0, noisy) {
        (false, _) => "Original".to_string(),
        (true, 1) => "Noisy".to_string(),
        (true, _) => format!("Noisy {variance}"),
    }
}

fn write_report(path: &Path, report: &Report) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if let Some(v) = args
        .noise_variances
        .iter()
        .find(|v| v.is_nan() || **v < 0.0)
    {
        return Err(Error::Config(format!("--noise-variance must be >= 0, got {v}")).into());
    }
    if args.downsample_factor == 0 {
        return Err(Error::Config("--downsample-factor must be >= 1".into()).into());
    }
    let dataset = PairedDataset::open(&args.data)?;
    let mut rows = Vec::new();
    for spec in &args.checkpoints {
        let (label, path) = parse_checkpoint(spec);
        let mut ckpt = load_checkpoint(&path, None)?;
        for &variance in &args.noise_variances {
            let options = EvalOptions {
                downsample_factor: args.downsample_factor,
                noise_variance: variance,
                kernel_length: args.kernel_length,
                seed: args.seed,
            };
            let report = evaluate_with(&dataset, &options, &path.display().to_string(), |b| {
                ckpt.generator.restore(b)
            })?;
            for (id, msg) in &report.failures {
                log::warn!("{label}: {id}: {msg}");
            }
            rows.push(ReportRow {
                dataset: condition_label(variance, &args.noise_variances),
                model: label.clone(),
                report,
            });
        }
    }
    let entries: Vec<TableEntry<'_>> = rows
        .iter()
        .map(|r| TableEntry {
            dataset: r.dataset.clone(),
            model: r.model.clone(),
            report: &r.report,
        })
        .collect();
    let table = format_table(&entries);
    print!("{table}");
    if let Some(path) = &args.report {
        write_report(path, &Report { table, rows })?;
    }
    Ok(())
}

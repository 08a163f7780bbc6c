use std::fs;
use std::path::Path;

use dcdeblur::data::{PairedDataset, PipelineConfig};
use dcdeblur::imageio::save_image;
use dcdeblur::{rng, Error, Tensor};
use tempfile::TempDir;

fn write(dir: &Path, name: &str, h: usize, w: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let img = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng::seeded(seed));
    save_image(&img, &dir.join(name)).unwrap();
}

fn cfg() -> PipelineConfig {
    PipelineConfig {
        crop: 16,
        downsample_factor: 2,
        noise_variance: 0.001,
        kernel_length: 5.0,
        batch: 2,
        seed: 9,
    }
}

#[test]
fn paired_directory_yields_full_batches() {
    let dir = TempDir::new().unwrap();
    for (i, name) in ["a.png", "b.png", "c.png"].iter().enumerate() {
        write(&dir.path().join("sharp"), name, 40, 48, i as u64);
        write(&dir.path().join("blur"), name, 40, 48, 10 + i as u64);
    }
    let ds = PairedDataset::open(dir.path()).unwrap();
    assert_eq!(ds.ids().collect::<Vec<_>>(), ["a.png", "b.png", "c.png"]);
    let (batches, skipped) = ds.epoch(&cfg(), 0).unwrap();
    assert_eq!((batches.len(), skipped), (1, 0));
    let b = &batches[0];
    assert_eq!(b.blurry.shape(), &[2, 3, 16, 16]);
    assert_eq!(b.sharp.shape(), &[2, 3, 16, 16]);
    assert!(b
        .records
        .iter()
        .all(|r| r.noise_seed.is_some() && r.kernel_seed.is_none()));

    let (again, _) = ds.epoch(&cfg(), 0).unwrap();
    assert_eq!(again[0].blurry, b.blurry);
    assert_eq!(again[0].ids, b.ids);
    let (next, _) = ds.epoch(&cfg(), 1).unwrap();
    assert_ne!(next[0].blurry, b.blurry);
}

#[test]
fn sharp_only_directory_synthesizes_blur() {
    let dir = TempDir::new().unwrap();
    write(&dir.path().join("sharp"), "x.png", 36, 36, 1);
    let ds = PairedDataset::open(dir.path()).unwrap();
    let pair = ds.pair(0, 5.0, 3).unwrap();
    assert!(pair.record.kernel_seed.is_some());
    assert_ne!(pair.blurry, pair.sharp);
    assert_eq!(ds.pair(0, 5.0, 3).unwrap().blurry, pair.blurry);
}

#[test]
fn unreadable_images_are_skipped() {
    let dir = TempDir::new().unwrap();
    write(&dir.path().join("sharp"), "good.png", 32, 32, 1);
    fs::write(dir.path().join("sharp/bad.png"), b"\x89PNG\r\n\x1a\nbroken").unwrap();
    let ds = PairedDataset::open(dir.path()).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.skipped.len(), 1);
    assert_eq!(ds.skipped[0].0, "bad.png");
}

#[test]
fn layout_errors() {
    let dir = TempDir::new().unwrap();
    assert!(matches!(
        PairedDataset::open(dir.path()),
        Err(Error::Data(_))
    ));

    write(&dir.path().join("sharp"), "a.png", 32, 32, 1);
    write(&dir.path().join("blur"), "b.png", 32, 32, 2);
    let err = PairedDataset::open(dir.path()).unwrap_err().to_string();
    assert!(err.contains("a.png") && err.contains("b.png"), "{err}");

    fs::remove_file(dir.path().join("blur/b.png")).unwrap();
    write(&dir.path().join("blur"), "a.png", 30, 32, 2);
    let ds = PairedDataset::open(dir.path());
    assert!(matches!(ds, Err(Error::Data(_))), "{ds:?}");
}

#[test]
fn too_small_images_are_skipped_per_sample() {
    let dir = TempDir::new().unwrap();
    write(&dir.path().join("sharp"), "big.png", 48, 48, 1);
    write(&dir.path().join("sharp"), "small.png", 20, 20, 2);
    let ds = PairedDataset::open(dir.path()).unwrap();
    let cfg = PipelineConfig { batch: 1, ..cfg() };
    let (batches, skipped) = ds.epoch(&cfg, 0).unwrap();
    assert_eq!((batches.len(), skipped), (1, 1));
    assert_eq!(batches[0].ids, ["big.png"]);
}

//! Training configuration and its flat `key=value` text form.
//!
//! ```text
//! # comment
//! lambda2=250
//! encoder_filters=64,128,256,512
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::PipelineConfig;
use crate::error::{Error, Result};
use crate::networks::NetworkSpec;
use crate::optim::Adam;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: Real,
    pub lambda2: Real,
    pub dc_window: usize,
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub d_steps_per_iter: usize,
    pub g_steps_per_iter: usize,
    pub crop: usize,
    pub downsample_factor: usize,
    pub noise_variance: Real,
    /// Arc length in pixels of synthesized blur for sharp-only datasets.
    pub kernel_length: Real,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Iterations between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Adds `wall_ms` to log records, which makes logs nondeterministic.
    pub log_timing: bool,
    pub generator: NetworkSpec,
    pub discriminator: NetworkSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 100.0,
            lambda2: 250.0,
            dc_window: 15,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            d_steps_per_iter: 1,
            g_steps_per_iter: 2,
            crop: 64,
            downsample_factor: 2,
            noise_variance: 0.0,
            kernel_length: 9.0,
            epochs: 200,
            batch: 1,
            seed: 42,
            checkpoint_every: 0,
            log_timing: false,
            generator: NetworkSpec::default_generator(),
            discriminator: NetworkSpec::default_discriminator(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("lambda1", "weight of the L1 content term"),
    ("lambda2", "weight of the dark channel term (0 disables it)"),
    ("dc_window", "dark channel window, odd"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam epsilon"),
    ("d_steps_per_iter", "discriminator updates per iteration"),
    ("g_steps_per_iter", "generator updates per iteration"),
    ("crop", "training crop side, a multiple of stride^depth"),
    ("downsample_factor", "box downsampling before cropping"),
    (
        "noise_variance",
        "Gaussian noise variance added to blurry crops",
    ),
    (
        "kernel_length",
        "synthetic blur length for sharp-only datasets",
    ),
    ("epochs", "passes over the dataset"),
    ("batch", "minibatch size"),
    ("seed", "master random seed"),
    (
        "checkpoint_every",
        "iterations between checkpoints, 0 for final only",
    ),
    ("log_timing", "record wall_ms in the step log (true/false)"),
    (
        "encoder_filters",
        "generator encoder widths, comma separated",
    ),
    (
        "discriminator_filters",
        "discriminator widths, comma separated",
    ),
    ("kernel", "convolution kernel size for both networks"),
    ("stride", "convolution stride for both networks"),
    ("leak", "LeakyReLU slope"),
    ("dropout_rate", "generator decoder dropout rate"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "dc_window" => self.dc_window = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "d_steps_per_iter" => self.d_steps_per_iter = parse(key, value)?,
            "g_steps_per_iter" => self.g_steps_per_iter = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "downsample_factor" => self.downsample_factor = parse(key, value)?,
            "noise_variance" => self.noise_variance = parse(key, value)?,
            "kernel_length" => self.kernel_length = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_timing" => self.log_timing = parse(key, value)?,
            "encoder_filters" => {
                let rate = self.generator.dropout_rate;
                let mut g = NetworkSpec::generator(&parse_list(key, value)?);
                g.kernel = self.generator.kernel;
                g.stride = self.generator.stride;
                g.leak = self.generator.leak;
                g.dropout_rate = rate;
                self.generator = g;
            }
            "discriminator_filters" => self.discriminator.encoder_filters = parse_list(key, value)?,
            "kernel" => {
                let k = parse(key, value)?;
                self.generator.kernel = k;
                self.discriminator.kernel = k;
            }
            "stride" => {
                let s = parse(key, value)?;
                self.generator.stride = s;
                self.discriminator.stride = s;
            }
            "leak" => {
                let a = parse(key, value)?;
                self.generator.leak = a;
                self.discriminator.leak = a;
            }
            "dropout_rate" => self.generator.dropout_rate = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file on top of `self` without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {lineno}: expected key=value, got `{line}`"))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {lineno}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Text form that [`TrainConfig::parse`] reads back to `self`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k}={v}").expect("string write");
        put("lambda1", self.lambda1.to_string());
        put("lambda2", self.lambda2.to_string());
        put("dc_window", self.dc_window.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("eps", self.eps.to_string());
        put("d_steps_per_iter", self.d_steps_per_iter.to_string());
        put("g_steps_per_iter", self.g_steps_per_iter.to_string());
        put("crop", self.crop.to_string());
        put("downsample_factor", self.downsample_factor.to_string());
        put("noise_variance", self.noise_variance.to_string());
        put("kernel_length", self.kernel_length.to_string());
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("seed", self.seed.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("log_timing", self.log_timing.to_string());
        put("encoder_filters", join(&self.generator.encoder_filters));
        put(
            "discriminator_filters",
            join(&self.discriminator.encoder_filters),
        );
        put("kernel", self.generator.kernel.to_string());
        put("stride", self.generator.stride.to_string());
        put("leak", self.generator.leak.to_string());
        put("dropout_rate", self.generator.dropout_rate.to_string());
        out
    }

    /// Every violated invariant, in key order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        check(
            self.lambda1 >= 0.0,
            format!("lambda1 must be >= 0, got {}", self.lambda1),
        );
        check(
            self.lambda2 >= 0.0,
            format!("lambda2 must be >= 0, got {}", self.lambda2),
        );
        check(
            self.dc_window % 2 == 1,
            format!(
                "dc_window must be a positive odd integer, got {}",
                self.dc_window
            ),
        );
        check(
            self.lr >= 0.0 && self.lr.is_finite(),
            format!("lr must be >= 0, got {}", self.lr),
        );
        check(
            (0.0..1.0).contains(&self.beta1),
            format!("beta1 must be in [0, 1), got {}", self.beta1),
        );
        check(
            (0.0..1.0).contains(&self.beta2),
            format!("beta2 must be in [0, 1), got {}", self.beta2),
        );
        check(self.eps > 0.0, format!("eps must be > 0, got {}", self.eps));
        check(
            self.d_steps_per_iter >= 1,
            "d_steps_per_iter must be >= 1".into(),
        );
        check(
            self.g_steps_per_iter >= 1,
            "g_steps_per_iter must be >= 1".into(),
        );
        let div = self.generator.divisor().max(self.discriminator.divisor());
        check(
            self.crop >= div.max(1) && div > 0 && self.crop.is_multiple_of(div),
            format!(
                "crop must be a positive multiple of stride^depth = {div}, got {}",
                self.crop
            ),
        );
        check(
            self.downsample_factor >= 1,
            "downsample_factor must be >= 1".into(),
        );
        check(
            self.noise_variance >= 0.0,
            format!("noise_variance must be >= 0, got {}", self.noise_variance),
        );
        check(
            self.kernel_length >= 1.0,
            format!("kernel_length must be >= 1, got {}", self.kernel_length),
        );
        check(self.epochs >= 1, "epochs must be >= 1".into());
        check(self.batch >= 1, "batch must be >= 1".into());
        v.extend(
            self.generator
                .generator_violations()
                .into_iter()
                .map(|m| format!("generator: {m}")),
        );
        v.extend(
            self.discriminator
                .discriminator_violations()
                .into_iter()
                .map(|m| format!("discriminator: {m}")),
        );
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    pub fn adam(&self) -> Adam {
        Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            crop: self.crop,
            downsample_factor: self.downsample_factor,
            noise_variance: self.noise_variance,
            kernel_length: self.kernel_length,
            batch: self.batch,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.lambda1, cfg.lambda2), (100.0, 250.0));
        assert_eq!((cfg.d_steps_per_iter, cfg.g_steps_per_iter), (1, 2));
    }

    #[test]
    fn dump_roundtrips() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("lambda2=0\nlr=0.000123\nencoder_filters=8,16\ndiscriminator_filters=4,8\ncrop=32\nseed=7")
            .unwrap();
        let back = TrainConfig::parse(&cfg.dump()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.generator.decoder_filters, vec![8, 3]);
    }

    #[test]
    fn every_key_is_settable_and_dumped() {
        let dumped = TrainConfig::default().dump();
        for (k, _) in KEYS {
            assert!(dumped.contains(&format!("{k}=")), "{k}");
        }
        assert_eq!(dumped.lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_key_names_line() {
        let err = TrainConfig::parse("lambda1=1\n\n# note\nbogus=3\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn validation_lists_every_violation() {
        let err = TrainConfig::parse("lambda1=-1\nbatch=0\ncrop=30\ndc_window=4").unwrap_err();
        match err {
            Error::InvalidConfig(v) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other}"),
        }
    }
}

//! Adversarial losses, the alternating D/G schedule and the training loop.
//!
//! Both losses are quantities to minimize. The discriminator minimizes
//! `-mean[log D(real) + log(1 - D(fake))]`; the generator minimizes
//! `mean log(1 - D(fake)) + lambda1 * L1 + lambda2 * DC`, the saturating form,
//! with probabilities clamped to `[1e-7, 1 - 1e-7]` before every log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::dark_channel::dark_channel_loss;
use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::networks::{build_discriminator, build_generator, ForwardCtx, Network};
use crate::optim::Adam;
use crate::rng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Probability clamp used before logs.
pub const PROB_EPS: Real = 1e-7;

fn check_probabilities(tape: &Tape, var: Var, what: &str) -> Result<()> {
    let v = tape.value(var);
    if let Some(bad) = v.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Numerical(format!(
            "{what} holds {bad}, outside [0, 1]; expected sigmoid outputs"
        )));
    }
    Ok(())
}

/// `mean log(x)` and `mean log(1 - x)` of clamped probabilities.
fn mean_log(tape: &mut Tape, p: Var, complement: bool) -> Var {
    let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let c = if complement {
        tape.affine(c, -1.0, 1.0)
    } else {
        c
    };
    let l = tape.log(c);
    tape.mean(l)
}

pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    check_probabilities(tape, d_real, "d_real")?;
    check_probabilities(tape, d_fake, "d_fake")?;
    let real = mean_log(tape, d_real, false);
    let fake = mean_log(tape, d_fake, true);
    let s = tape.add(real, fake)?;
    Ok(tape.scale(s, -1.0))
}

/// Generator objective and its separately evaluated terms.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adv: Real,
    pub content: Real,
    pub darkchannel: Real,
}

/// `restored` and `sharp` are in `[-1, 1]`. The dark channel term sees both
/// mapped to `[0, 1]`, and is left off the tape entirely when
/// `lambda2 == 0`.
pub fn generator_loss(
    tape: &mut Tape,
    d_fake: Var,
    restored: Var,
    sharp: Var,
    cfg: &TrainConfig,
) -> Result<GeneratorLoss> {
    check_probabilities(tape, d_fake, "d_fake")?;
    let sharp = tape.detach(sharp);
    let adv = mean_log(tape, d_fake, true);
    let content = tape.mean_abs_diff(restored, sharp)?;
    let weighted = tape.scale(content, cfg.lambda1);
    let mut total = tape.add(adv, weighted)?;
    let mut darkchannel = 0.0;
    if cfg.lambda2 != 0.0 {
        let r01 = tape.affine(restored, 0.5, 0.5);
        let s01 = tape.affine(sharp, 0.5, 0.5);
        let dc = dark_channel_loss(tape, r01, s01, cfg.dc_window)?;
        darkchannel = tape.value(dc).item();
        let weighted = tape.scale(dc, cfg.lambda2);
        total = tape.add(total, weighted)?;
    }
    let out = GeneratorLoss {
        total,
        adv: tape.value(adv).item(),
        content: tape.value(content).item(),
        darkchannel,
    };
    for (name, v) in [
        ("g_adv", out.adv),
        ("g_content", out.content),
        ("g_darkchannel", out.darkchannel),
        ("g_total", tape.value(total).item()),
    ] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} is {v}")));
        }
    }
    Ok(out)
}

/// Losses of the last D and G updates in one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub d_loss: Real,
    pub g_adv: Real,
    pub g_content: Real,
    pub g_darkchannel: Real,
    pub g_total: Real,
    #[serde(skip)]
    pub wall_ms: Real,
}

/// Maps `[0, 1]` images to the networks' `[-1, 1]` range.
pub fn to_signed(image01: &Tensor) -> Tensor {
    image01.map(|v| 2.0 * v - 1.0)
}

/// Owns both networks and the optimizer settings.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: Network,
    pub discriminator: Network,
    /// Completed iterations.
    pub iteration: u64,
    adam: Adam,
}

impl Trainer {
    /// Fresh networks initialized from streams derived from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = build_generator(&cfg.generator, &mut rng::stream(cfg.seed, "init", &[0]))?;
        let discriminator = build_discriminator(
            &cfg.discriminator,
            cfg.crop,
            &mut rng::stream(cfg.seed, "init", &[1]),
        )?;
        Ok(Self::from_parts(cfg, generator, discriminator, 0))
    }

    pub fn from_checkpoint(cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.generator.spec != cfg.generator || ckpt.discriminator.spec != cfg.discriminator {
            return Err(Error::config(
                "checkpoint network specs differ from the config",
            ));
        }
        if ckpt.discriminator.input_size != Some(cfg.crop) {
            return Err(Error::config(format!(
                "checkpoint discriminator was built for {:?} inputs, config crop is {}",
                ckpt.discriminator.input_size, cfg.crop
            )));
        }
        Ok(Self::from_parts(
            cfg,
            ckpt.generator,
            ckpt.discriminator,
            ckpt.iteration,
        ))
    }

    fn from_parts(
        cfg: TrainConfig,
        mut generator: Network,
        mut discriminator: Network,
        iteration: u64,
    ) -> Self {
        generator.set_mode(Mode::Train);
        discriminator.set_mode(Mode::Train);
        Trainer {
            adam: cfg.adam(),
            cfg,
            generator,
            discriminator,
            iteration,
        }
    }

    /// One discriminator update on signed images; returns the D loss. The
    /// generator runs frozen, without touching its running statistics.
    pub fn discriminator_step<R: rand::Rng + ?Sized>(
        &mut self,
        blurry: &Tensor,
        sharp: &Tensor,
        rng: &mut R,
    ) -> Result<Real> {
        let n = blurry.shape()[0];
        let mut tape = Tape::new();
        let b = tape.constant(blurry.clone());
        let s = tape.constant(sharp.clone());
        let g_bound = self.generator.bind(&mut tape, false);
        let mut g_ctx = ForwardCtx {
            update_stats: false,
            rng: &mut *rng,
        };
        let fake = self
            .generator
            .generate(&mut tape, &g_bound, b, &mut g_ctx)?;
        let fake = tape.detach(fake);
        let d_bound = self.discriminator.bind(&mut tape, true);
        let candidates = tape.concat_batch(s, fake)?;
        let conditions = tape.concat_batch(b, b)?;
        let mut d_ctx = ForwardCtx {
            update_stats: true,
            rng: &mut *rng,
        };
        let scores = self
            .discriminator
            .discriminate(&mut tape, &d_bound, candidates, conditions, &mut d_ctx)?;
        let d_real = tape.narrow_batch(scores, 0, n)?;
        let d_fake = tape.narrow_batch(scores, n, n)?;
        let loss = discriminator_loss(&mut tape, d_real, d_fake)?;
        let d_loss = tape.value(loss).item();
        if !d_loss.is_finite() {
            return Err(Error::Numerical(format!("d_loss is {d_loss}")));
        }
        let mut grads = tape.backward(loss)?;
        self.discriminator.collect_grads(&d_bound, &mut grads)?;
        drop(tape);
        self.adam.step(&mut self.discriminator.parameters)?;
        Ok(d_loss)
    }

    /// One generator update on signed images; returns
    /// `(adv, content, darkchannel, total)`. The discriminator runs frozen.
    pub fn generator_step<R: rand::Rng + ?Sized>(
        &mut self,
        blurry: &Tensor,
        sharp: &Tensor,
        rng: &mut R,
    ) -> Result<(Real, Real, Real, Real)> {
        let mut tape = Tape::new();
        let b = tape.constant(blurry.clone());
        let s = tape.constant(sharp.clone());
        let g_bound = self.generator.bind(&mut tape, true);
        let mut g_ctx = ForwardCtx {
            update_stats: true,
            rng: &mut *rng,
        };
        let restored = self
            .generator
            .generate(&mut tape, &g_bound, b, &mut g_ctx)?;
        let d_bound = self.discriminator.bind(&mut tape, false);
        let mut d_ctx = ForwardCtx {
            update_stats: false,
            rng: &mut *rng,
        };
        // Score fakes inside the same real+fake batch the D step normalizes over.
        let n = blurry.shape()[0];
        let candidates = tape.concat_batch(s, restored)?;
        let conditions = tape.concat_batch(b, b)?;
        let scores = self
            .discriminator
            .discriminate(&mut tape, &d_bound, candidates, conditions, &mut d_ctx)?;
        let d_fake = tape.narrow_batch(scores, n, n)?;
        let loss = generator_loss(&mut tape, d_fake, restored, s, &self.cfg)?;
        let terms = (
            loss.adv,
            loss.content,
            loss.darkchannel,
            tape.value(loss.total).item(),
        );
        let mut grads = tape.backward(loss.total)?;
        self.generator.collect_grads(&g_bound, &mut grads)?;
        drop(tape);
        self.adam.step(&mut self.generator.parameters)?;
        Ok(terms)
    }

    /// One iteration on a batch of `[0, 1]` images: `d_steps_per_iter`
    /// discriminator updates, then `g_steps_per_iter` generator updates, each
    /// with a fresh generator forward.
    pub fn train_step(&mut self, blurry01: &Tensor, sharp01: &Tensor) -> Result<StepReport> {
        blurry01.expect_same_shape(sharp01, "train_step batch")?;
        let start = Instant::now();
        let blurry = to_signed(blurry01);
        let sharp = to_signed(sharp01);
        let mut r = rng::stream(self.cfg.seed, "dropout", &[self.iteration]);
        let mut d_loss = 0.0;
        for _ in 0..self.cfg.d_steps_per_iter {
            d_loss = self.discriminator_step(&blurry, &sharp, &mut r)?;
        }
        let mut terms = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..self.cfg.g_steps_per_iter {
            terms = self.generator_step(&blurry, &sharp, &mut r)?;
        }
        let report = StepReport {
            iteration: self.iteration,
            d_loss,
            g_adv: terms.0,
            g_content: terms.1,
            g_darkchannel: terms.2,
            g_total: terms.3,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Restores `[0, 1]` images with the generator in infer mode.
    pub fn restore(&mut self, blurry01: &Tensor) -> Result<Tensor> {
        self.generator.restore(blurry01)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        save_checkpoint(
            &mut self.generator,
            &mut self.discriminator,
            self.iteration,
            path,
        )
    }
}

/// One JSON-lines log record.
pub fn log_line(report: &StepReport, timing: bool) -> String {
    let mut value = serde_json::to_value(report).expect("report serializes");
    if timing {
        value["wall_ms"] = serde_json::json!(report.wall_ms);
    }
    value.to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopOutcome {
    pub checkpoint: PathBuf,
    /// Steps run by this call, excluding resumed ones.
    pub steps: u64,
    pub interrupted: bool,
    /// Samples skipped across all epochs.
    pub skipped: usize,
}

pub const FINAL_CHECKPOINT: &str = "final.dgc";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn periodic_checkpoint_name(iteration: u64) -> String {
    format!("checkpoint_{iteration:08}.dgc")
}

/// Runs epochs of [`Trainer::train_step`] over augmented batches from
/// `dataset`, appending one log record per step to `log`. Iterations the
/// trainer has already completed (after a resume) are skipped, so a resumed
/// run sees exactly the batches an uninterrupted one would. When `stop` is
/// raised the loop finishes its current step and writes the final
/// checkpoint.
pub fn train_loop(
    trainer: &mut Trainer,
    dataset: &PairedDataset,
    out_dir: &Path,
    log: &mut dyn Write,
    stop: Option<&AtomicBool>,
) -> Result<LoopOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pipeline = trainer.cfg.pipeline();
    let resume_at = trainer.iteration;
    let mut global = 0u64;
    let mut steps = 0u64;
    let mut skipped = 0;
    let mut interrupted = false;
    'epochs: for epoch in 0..trainer.cfg.epochs as u64 {
        let (batches, epoch_skipped) = dataset.epoch(&pipeline, epoch)?;
        skipped += epoch_skipped;
        for batch in batches {
            if global < resume_at {
                global += 1;
                continue;
            }
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                interrupted = true;
                break 'epochs;
            }
            let report = trainer.train_step(&batch.blurry, &batch.sharp)?;
            writeln!(log, "{}", log_line(&report, trainer.cfg.log_timing))
                .map_err(|e| Error::io(out_dir.join(LOG_FILE), e))?;
            global += 1;
            steps += 1;
            let every = trainer.cfg.checkpoint_every;
            if every > 0 && trainer.iteration.is_multiple_of(every) {
                trainer.save(&out_dir.join(periodic_checkpoint_name(trainer.iteration)))?;
            }
        }
    }
    log.flush()
        .map_err(|e| Error::io(out_dir.join(LOG_FILE), e))?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&checkpoint)?;
    Ok(LoopOutcome {
        checkpoint,
        steps,
        interrupted,
        skipped,
    })
}

//! Registered finite-difference checks: every differentiable op, the toy
//! networks end to end, and the composite training losses.
//!
//! Each case builds its inputs from a seed and returns a
//! [`GradcheckReport`]. Non-smooth ops (LeakyReLU, clamp, L1, min pooling)
//! draw inputs kept well away from their kinks and ties.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::TrainConfig;
use crate::dark_channel::{dark_channel, dark_channel_loss};
use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::networks::{
    build_discriminator, build_generator, Bound, ForwardCtx, Network, NetworkSpec,
};
use crate::rng;
use crate::tape::{Mode, RunningStats, Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::training::{discriminator_loss, generator_loss};

/// Tolerance for convolutions, batch norm and dark channel ops.
pub const STRUCTURED_TOL: Real = 1e-3;
/// Tolerance for elementwise ops and reductions.
pub const ELEMENTWISE_TOL: Real = 1e-4;
/// Tolerance for whole networks and composite losses.
pub const COMPOSITE_TOL: Real = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Network,
    Loss,
}

pub struct Case {
    pub name: &'static str,
    pub tolerance: Real,
    check: fn(u64) -> Result<GradcheckReport>,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub tolerance: Real,
    pub report: GradcheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error <= self.tolerance
    }
}

impl Case {
    pub fn run(&self, seed: u64) -> Result<CaseResult> {
        Ok(CaseResult {
            name: self.name,
            seed,
            tolerance: self.tolerance,
            report: (self.check)(seed)?,
        })
    }
}

fn gen(seed: u64) -> rng::Rng {
    rng::stream(seed, "gradcheck", &[])
}

/// Fixed random weights contracting `y` to a scalar.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng::stream(seed, "project", &[]));
    t.dot_const(y, w)
}

/// Distinct values at least `0.5 / len` apart, in `[0.05, 0.95]`.
fn separated(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(r);
    Tensor::new(
        shape.to_vec(),
        ranks
            .iter()
            .map(|&k| 0.05 + 0.9 * (k as Real + 0.5) / n as Real)
            .collect(),
    )
    .expect("shape matches")
}

/// Values with magnitude in `[0.05, 1]` and random sign.
fn off_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn normal(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 0.0, 1.0, r)
}

macro_rules! unary {
    ($seed:expr, $x:expr, $step:expr, |$t:ident, $v:ident| $body:expr) => {{
        let seed = $seed;
        gradcheck(
            |$t: &mut Tape, vs: &[Var]| {
                let $v = vs[0];
                let y = $body?;
                project($t, y, seed)
            },
            &[$x],
            $step,
        )
    }};
}

fn conv2d(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let inputs = [
        normal(&[2, 2, 6, 6], &mut r),
        normal(&[3, 2, 3, 3], &mut r),
        normal(&[3], &mut r),
    ];
    gradcheck(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(t, y, seed)
        },
        &inputs,
        1e-5,
    )
}

fn conv2d_k5(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let inputs = [
        normal(&[1, 3, 5, 5], &mut r),
        normal(&[2, 3, 5, 5], &mut r),
        normal(&[2], &mut r),
    ];
    gradcheck(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 2)?;
            project(t, y, seed)
        },
        &inputs,
        1e-5,
    )
}

fn conv_transpose2d(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let inputs = [
        normal(&[2, 3, 3, 3], &mut r),
        normal(&[3, 2, 5, 5], &mut r),
        normal(&[2], &mut r),
    ];
    gradcheck(
        |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2], 2, 2, 1)?;
            project(t, y, seed)
        },
        &inputs,
        1e-5,
    )
}

fn batch_norm(seed: u64, mode: Mode) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let inputs = [
        normal(&[2, 3, 4, 4], &mut r),
        Tensor::uniform(&[3], 0.5, 1.5, &mut r),
        normal(&[3], &mut r),
    ];
    let mut stats = RunningStats::new(3);
    stats.mean = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
    stats.var = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
    gradcheck(
        |t, v| {
            let y = t.batch_norm(v[0], v[1], v[2], mode, &mut stats.clone())?;
            project(t, y, seed)
        },
        &inputs,
        1e-5,
    )
}

fn batch_norm_train(seed: u64) -> Result<GradcheckReport> {
    batch_norm(seed, Mode::Train)
}

fn batch_norm_infer(seed: u64) -> Result<GradcheckReport> {
    batch_norm(seed, Mode::Infer)
}

fn leaky_relu(seed: u64) -> Result<GradcheckReport> {
    let x = off_zero(&[2, 3, 4, 4], &mut gen(seed));
    unary!(seed, x, 1e-5, |t, v| t.leaky_relu(v, 0.2))
}

fn sigmoid(seed: u64) -> Result<GradcheckReport> {
    let x = normal(&[2, 3, 4, 4], &mut gen(seed)).map(|v| 2.0 * v);
    unary!(seed, x, 1e-5, |t, v| Ok::<_, crate::Error>(t.sigmoid(v)))
}

fn tanh(seed: u64) -> Result<GradcheckReport> {
    let x = normal(&[2, 3, 4, 4], &mut gen(seed));
    unary!(seed, x, 1e-5, |t, v| Ok::<_, crate::Error>(t.tanh(v)))
}

fn dropout(seed: u64) -> Result<GradcheckReport> {
    let x = normal(&[2, 3, 4, 4], &mut gen(seed));
    unary!(seed, x, 1e-5, |t, v| t.dropout(
        v,
        0.5,
        Mode::Train,
        &mut rng::stream(seed, "mask", &[])
    ))
}

fn min_pool(seed: u64) -> Result<GradcheckReport> {
    let x = separated(&[2, 3, 6, 6], &mut gen(seed));
    unary!(seed, x, 1e-6, |t, v| t.min_pool_channels_window(v, 3))
}

fn dark_channel_op(seed: u64) -> Result<GradcheckReport> {
    let x = separated(&[1, 3, 8, 8], &mut gen(seed));
    unary!(seed, x, 1e-6, |t, v| dark_channel(t, v, 5))
}

fn dark_channel_loss_case(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let x = separated(&[1, 3, 8, 8], &mut r);
    let sharp = separated(&[1, 3, 8, 8], &mut r).map(|v| v * 0.5);
    gradcheck(
        |t, v| {
            let s = t.constant(sharp.clone());
            dark_channel_loss(t, v[0], s, 3)
        },
        &[x],
        1e-6,
    )
}

fn clamp(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let x = Tensor::from_fn(&[2, 3, 4, 4], |_| {
        [-1.0, -0.5, 0.0, 0.5][r.random_range(0..4)] + r.random_range(0.02..0.48)
    });
    unary!(seed, x, 1e-5, |t, v| Ok::<_, crate::Error>(
        t.clamp(v, -0.5, 0.5)
    ))
}

fn log(seed: u64) -> Result<GradcheckReport> {
    let x = Tensor::uniform(&[2, 3, 4, 4], 0.2, 2.0, &mut gen(seed));
    unary!(seed, x, 1e-6, |t, v| Ok::<_, crate::Error>(t.log(v)))
}

fn affine(seed: u64) -> Result<GradcheckReport> {
    let x = normal(&[2, 3, 4, 4], &mut gen(seed));
    unary!(seed, x, 1e-5, |t, v| Ok::<_, crate::Error>(
        t.affine(v, 1.7, -0.3)
    ))
}

fn scale(seed: u64) -> Result<GradcheckReport> {
    let x = normal(&[2, 3, 4, 4], &mut gen(seed));
    unary!(seed, x, 1e-5, |t, v| Ok::<_, crate::Error>(
        t.scale(v, -2.5)
    ))
}

fn binary(
    seed: u64,
    a: Tensor,
    b: Tensor,
    step: Real,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    gradcheck(
        |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, seed)
        },
        &[a, b],
        step,
    )
}

fn add(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let (a, b) = (normal(&[2, 3, 4, 4], &mut r), normal(&[2, 3, 4, 4], &mut r));
    binary(seed, a, b, 1e-5, |t, a, b| t.add(a, b))
}

fn concat_channels(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let (a, b) = (normal(&[2, 2, 3, 3], &mut r), normal(&[2, 1, 3, 3], &mut r));
    binary(seed, a, b, 1e-5, |t, a, b| t.concat_channels(a, b))
}

fn concat_batch(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let (a, b) = (normal(&[1, 2, 3, 3], &mut r), normal(&[2, 2, 3, 3], &mut r));
    binary(seed, a, b, 1e-5, |t, a, b| t.concat_batch(a, b))
}

fn narrow_batch(seed: u64) -> Result<GradcheckReport> {
    let x = normal(&[3, 2, 2, 2], &mut gen(seed));
    unary!(seed, x, 1e-5, |t, v| t.narrow_batch(v, 1, 2))
}

fn mean_abs_diff(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let a = normal(&[2, 3, 4, 4], &mut r);
    let gap = off_zero(&[2, 3, 4, 4], &mut r);
    let b = a.zip_map(&gap, |x, g| x + g)?;
    binary(seed, a, b, 1e-5, |t, a, b| t.mean_abs_diff(a, b))
}

fn mean_sq_diff(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let (a, b) = (normal(&[2, 3, 4, 4], &mut r), normal(&[2, 3, 4, 4], &mut r));
    binary(seed, a, b, 1e-5, |t, a, b| t.mean_sq_diff(a, b))
}

fn mean(seed: u64) -> Result<GradcheckReport> {
    let x = normal(&[2, 3, 4, 4], &mut gen(seed));
    unary!(seed, x, 1e-5, |t, v| Ok::<_, crate::Error>(t.mean(v)))
}

fn sum(seed: u64) -> Result<GradcheckReport> {
    let x = normal(&[2, 3, 4, 4], &mut gen(seed));
    unary!(seed, x, 1e-5, |t, v| Ok::<_, crate::Error>(t.sum(v)))
}

fn dot_const(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let x = normal(&[2, 3, 4, 4], &mut r);
    let w = normal(&[2, 3, 4, 4], &mut r);
    gradcheck(|t, v| t.dot_const(v[0], w.clone()), &[x], 1e-5)
}

fn discriminator_loss_logits(seed: u64) -> Result<GradcheckReport> {
    let mut r = gen(seed);
    let inputs = [
        Tensor::randn(&[3, 1, 1, 1], 0.0, 1.5, &mut r),
        Tensor::randn(&[3, 1, 1, 1], 0.0, 1.5, &mut r),
    ];
    gradcheck(
        |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.sigmoid(v[1]);
            discriminator_loss(t, a, b)
        },
        &inputs,
        1e-5,
    )
}

/// Toy 2-block networks on 16x16 inputs.
pub const TOY_SIZE: usize = 16;

/// Multipliers on the toy weights for layers feeding batch norm and for the rest.
const NORMALIZED_WEIGHT_SCALE: Real = 100.0;
const PLAIN_WEIGHT_SCALE: Real = 5.0;

fn toy_networks(seed: u64) -> Result<(Network, Network)> {
    let mut g = build_generator(
        &NetworkSpec::generator(&[4, 8]),
        &mut rng::stream(seed, "toy", &[0]),
    )?;
    let mut d = build_discriminator(
        &NetworkSpec::discriminator(&[4, 8]),
        TOY_SIZE,
        &mut rng::stream(seed, "toy", &[1]),
    )?;
    for net in [&mut g, &mut d] {
        let normalized: Vec<String> = net
            .parameters
            .iter()
            .filter_map(|p| {
                p.name
                    .strip_suffix(".bn.gamma")
                    .map(|n| format!("{n}.weight"))
            })
            .collect();
        for p in net.parameters.iter_mut() {
            if normalized.contains(&p.name) {
                p.value = p.value.map(|v| v * NORMALIZED_WEIGHT_SCALE);
            } else if p.name.ends_with(".weight") {
                p.value = p.value.map(|v| v * PLAIN_WEIGHT_SCALE);
            }
        }
    }
    g.set_mode(Mode::Train);
    d.set_mode(Mode::Train);
    Ok((g, d))
}

fn params(net: &Network) -> Vec<Tensor> {
    net.parameters.iter().map(|p| p.value.clone()).collect()
}

fn image(seed: u64, purpose: &str) -> Tensor {
    Tensor::uniform(
        &[1, 3, TOY_SIZE, TOY_SIZE],
        -1.0,
        1.0,
        &mut rng::stream(seed, purpose, &[]),
    )
}

fn generator_forward(
    t: &mut Tape,
    g: &Network,
    vars: &[Var],
    blurry: Var,
    seed: u64,
) -> Result<Var> {
    let mut g = g.clone();
    let bound = Bound::new(vars.to_vec(), true);
    let mut r = rng::stream(seed, "mask", &[]);
    let mut ctx = ForwardCtx {
        update_stats: false,
        rng: &mut r,
    };
    g.generate(t, &bound, blurry, &mut ctx)
}

fn discriminator_forward(
    t: &mut Tape,
    d: &Network,
    vars: &[Var],
    candidates: Var,
    conditions: Var,
) -> Result<Var> {
    let mut d = d.clone();
    let bound = Bound::new(vars.to_vec(), true);
    let mut r = rng::seeded(0);
    let mut ctx = ForwardCtx {
        update_stats: false,
        rng: &mut r,
    };
    d.discriminate(t, &bound, candidates, conditions, &mut ctx)
}

/// Sum of the generator output with respect to the input and every
/// parameter.
fn generator_network(seed: u64) -> Result<GradcheckReport> {
    let (g, _) = toy_networks(seed)?;
    let mut inputs = vec![image(seed, "blurry")];
    inputs.extend(params(&g));
    gradcheck(
        |t, v| {
            let y = generator_forward(t, &g, &v[1..], v[0], seed)?;
            Ok(t.sum(y))
        },
        &inputs,
        1e-5,
    )
}

fn discriminator_network(seed: u64) -> Result<GradcheckReport> {
    let (_, d) = toy_networks(seed)?;
    let mut inputs = vec![image(seed, "sharp"), image(seed, "blurry")];
    inputs.extend(params(&d));
    gradcheck(
        |t, v| {
            let y = discriminator_forward(t, &d, &v[2..], v[0], v[1])?;
            Ok(t.sum(y))
        },
        &inputs,
        1e-5,
    )
}

fn loss_config() -> TrainConfig {
    TrainConfig {
        dc_window: 5,
        ..TrainConfig::default()
    }
}

/// Full generator objective with respect to the generator parameters, the
/// discriminator frozen and scoring the real+fake batch.
fn generator_objective(seed: u64) -> Result<GradcheckReport> {
    let (g, d) = toy_networks(seed)?;
    let blurry = image(seed, "blurry");
    // Target offset from the initial output by at least 0.05 per element,
    // toward zero, so the L1 term has no kink within reach of the step.
    let restored = {
        let mut t = Tape::new();
        let vars: Vec<Var> = params(&g).into_iter().map(|p| t.constant(p)).collect();
        let b = t.constant(blurry.clone());
        let y = generator_forward(&mut t, &g, &vars, b, seed)?;
        t.value(y).clone()
    };
    let gaps = Tensor::uniform(
        restored.shape(),
        0.05,
        0.3,
        &mut rng::stream(seed, "target", &[]),
    );
    let sharp = restored.zip_map(&gaps, |v, gap| if v > 0.0 { v - gap } else { v + gap })?;
    let d_params = params(&d);
    let cfg = loss_config();
    gradcheck(
        |t, v| {
            let b = t.constant(blurry.clone());
            let s = t.constant(sharp.clone());
            let restored = generator_forward(t, &g, v, b, seed)?;
            let dv: Vec<Var> = d_params.iter().map(|p| t.constant(p.clone())).collect();
            let cand = t.concat_batch(s, restored)?;
            let cond = t.concat_batch(b, b)?;
            let scores = discriminator_forward(t, &d, &dv, cand, cond)?;
            let d_fake = t.narrow_batch(scores, 1, 1)?;
            Ok(generator_loss(t, d_fake, restored, s, &cfg)?.total)
        },
        &params(&g),
        1e-3,
    )
}

/// Discriminator objective with respect to the discriminator parameters on
/// a fixed generator output.
fn discriminator_objective(seed: u64) -> Result<GradcheckReport> {
    let (g, d) = toy_networks(seed)?;
    let (blurry, sharp) = (image(seed, "blurry"), image(seed, "sharp"));
    let fake = {
        let mut t = Tape::new();
        let vars: Vec<Var> = params(&g).into_iter().map(|p| t.constant(p)).collect();
        let b = t.constant(blurry.clone());
        let y = generator_forward(&mut t, &g, &vars, b, seed)?;
        t.value(y).clone()
    };
    gradcheck(
        |t, v| {
            let b = t.constant(blurry.clone());
            let cand = t.constant(Tensor::stack_batch(&[sharp.clone(), fake.clone()])?);
            let cond = t.concat_batch(b, b)?;
            let scores = discriminator_forward(t, &d, v, cand, cond)?;
            let real = t.narrow_batch(scores, 0, 1)?;
            let fake = t.narrow_batch(scores, 1, 1)?;
            discriminator_loss(t, real, fake)
        },
        &params(&d),
        1e-3,
    )
}

macro_rules! case {
    ($name:literal, $tol:expr, $f:expr) => {
        Case {
            name: $name,
            tolerance: $tol,
            check: $f,
        }
    };
}

pub fn cases(scope: Scope) -> Vec<Case> {
    match scope {
        Scope::Op => vec![
            case!("conv2d", STRUCTURED_TOL, conv2d),
            case!("conv2d_k5", STRUCTURED_TOL, conv2d_k5),
            case!("conv_transpose2d", STRUCTURED_TOL, conv_transpose2d),
            case!("batch_norm_train", STRUCTURED_TOL, batch_norm_train),
            case!("batch_norm_infer", STRUCTURED_TOL, batch_norm_infer),
            case!("min_pool", STRUCTURED_TOL, min_pool),
            case!("dark_channel", STRUCTURED_TOL, dark_channel_op),
            case!("dark_channel_loss", STRUCTURED_TOL, dark_channel_loss_case),
            case!("leaky_relu", ELEMENTWISE_TOL, leaky_relu),
            case!("sigmoid", ELEMENTWISE_TOL, sigmoid),
            case!("tanh", ELEMENTWISE_TOL, tanh),
            case!("dropout", ELEMENTWISE_TOL, dropout),
            case!("clamp", ELEMENTWISE_TOL, clamp),
            case!("log", ELEMENTWISE_TOL, log),
            case!("affine", ELEMENTWISE_TOL, affine),
            case!("scale", ELEMENTWISE_TOL, scale),
            case!("add", ELEMENTWISE_TOL, add),
            case!("concat_channels", ELEMENTWISE_TOL, concat_channels),
            case!("concat_batch", ELEMENTWISE_TOL, concat_batch),
            case!("narrow_batch", ELEMENTWISE_TOL, narrow_batch),
            case!("mean_abs_diff", ELEMENTWISE_TOL, mean_abs_diff),
            case!("mean_sq_diff", ELEMENTWISE_TOL, mean_sq_diff),
            case!("mean", ELEMENTWISE_TOL, mean),
            case!("sum", ELEMENTWISE_TOL, sum),
            case!("dot_const", ELEMENTWISE_TOL, dot_const),
        ],
        Scope::Network => vec![
            case!("generator", COMPOSITE_TOL, generator_network),
            case!("discriminator", COMPOSITE_TOL, discriminator_network),
        ],
        Scope::Loss => vec![
            case!(
                "discriminator_loss_logits",
                ELEMENTWISE_TOL,
                discriminator_loss_logits
            ),
            case!("generator_objective", COMPOSITE_TOL, generator_objective),
            case!(
                "discriminator_objective",
                COMPOSITE_TOL,
                discriminator_objective
            ),
        ],
    }
}

/// Runs every case of `scope` for seeds `first_seed..first_seed + seeds`.
pub fn run(scope: Scope, first_seed: u64, seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in cases(scope) {
        for seed in first_seed..first_seed + seeds {
            out.push(case.run(seed)?);
        }
    }
    Ok(out)
}

/// One row per case: worst seed, worst error, tolerance and verdict.
pub fn format_results(results: &[CaseResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<26} {:>6} {:>12} {:>9} {:>8} {:>9}  worst element",
        "case", "seeds", "max rel err", "tol", "result", "skipped"
    );
    let mut names: Vec<&str> = results.iter().map(|r| r.name).collect();
    names.dedup();
    for name in names {
        let rows: Vec<&CaseResult> = results.iter().filter(|r| r.name == name).collect();
        let worst = rows
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
            .expect("at least one seed");
        let pass = rows.iter().all(|r| r.passed());
        let skipped: usize = rows.iter().map(|r| r.report.straddling).sum();
        let total: usize = rows
            .iter()
            .map(|r| r.report.straddling + r.report.checked)
            .sum();
        let _ = writeln!(
            out,
            "{:<26} {:>6} {:>12.3e} {:>9.0e} {:>8} {:>8.1}%  seed {} input {} index {} (analytic {:.6e}, numeric {:.6e})",
            name,
            rows.len(),
            worst.report.max_rel_error,
            worst.tolerance,
            if pass { "pass" } else { "FAIL" },
            100.0 * skipped as Real / total.max(1) as Real,
            worst.seed,
            worst.report.worst_input,
            worst.report.worst_index,
            worst.report.analytic,
            worst.report.numeric,
        );
    }
    out
}

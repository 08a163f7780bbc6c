//! Generator and discriminator builders.
//!
//! The generator is an encoder-decoder: stride-2 convolutions down to a
//! bottleneck, then stride-2 transposed convolutions back up. Each decoder
//! block after the first sees its predecessor's output concatenated with the
//! encoder activation of the same resolution. The last decoder block maps to
//! three channels through `tanh`, so images live in `[-1, 1]`.
//!
//! The discriminator sees the candidate sharp image stacked with the blurry
//! input (six channels), runs stride-2 conv blocks and collapses the final
//! grid with one full-grid convolution into a single sigmoid score.
//!
//! Every block except the first of each network is conv, batch norm,
//! LeakyReLU.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tape::{Gradients, Mode, RunningStats, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
pub const INIT_STD: Real = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Output channels of each encoder (or discriminator) block.
    pub encoder_filters: Vec<usize>,
    /// Output channels of each decoder block; the last one is the image
    /// channel count. Empty for discriminators.
    pub decoder_filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub leak: Real,
    pub dropout_rate: Real,
    /// Decoder block indices that apply dropout.
    pub dropout_blocks: Vec<usize>,
    pub normalize_first_layer: bool,
}

impl NetworkSpec {
    /// Generator whose decoder mirrors `encoder_filters`, with dropout 0.5 on
    /// the first half of the decoder blocks.
    pub fn generator(encoder_filters: &[usize]) -> Self {
        let n = encoder_filters.len();
        let mut decoder_filters: Vec<usize> =
            encoder_filters.iter().rev().skip(1).copied().collect();
        decoder_filters.push(IMAGE_CHANNELS);
        NetworkSpec {
            encoder_filters: encoder_filters.to_vec(),
            decoder_filters,
            kernel: 5,
            stride: 2,
            leak: 0.2,
            dropout_rate: 0.5,
            dropout_blocks: (0..n / 2).collect(),
            normalize_first_layer: false,
        }
    }

    pub fn discriminator(filters: &[usize]) -> Self {
        NetworkSpec {
            encoder_filters: filters.to_vec(),
            decoder_filters: Vec::new(),
            kernel: 5,
            stride: 2,
            leak: 0.2,
            dropout_rate: 0.0,
            dropout_blocks: Vec::new(),
            normalize_first_layer: false,
        }
    }

    pub fn default_generator() -> Self {
        Self::generator(&[64, 128, 256, 512])
    }

    pub fn default_discriminator() -> Self {
        Self::discriminator(&[64, 128, 256, 512])
    }

    pub fn depth(&self) -> usize {
        self.encoder_filters.len()
    }

    /// Input sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        self.stride.pow(self.depth() as u32)
    }

    fn common_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.encoder_filters.is_empty() {
            v.push("encoder_filters must not be empty".to_string());
        }
        if self.encoder_filters.contains(&0) {
            v.push("encoder_filters entries must be positive".to_string());
        }
        if self.kernel.is_multiple_of(2) {
            v.push(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.stride == 0 {
            v.push("stride must be >= 1".to_string());
        }
        if !(self.leak > 0.0 && self.leak < 1.0) {
            v.push(format!("leak must be in (0, 1), got {}", self.leak));
        }
        v
    }

    pub fn generator_violations(&self) -> Vec<String> {
        let mut v = self.common_violations();
        if self.decoder_filters.len() != self.encoder_filters.len() {
            v.push(format!(
                "decoder_filters has {} entries but encoder_filters has {}",
                self.decoder_filters.len(),
                self.encoder_filters.len()
            ));
        }
        if self.decoder_filters.contains(&0) {
            v.push("decoder_filters entries must be positive".to_string());
        }
        if self
            .decoder_filters
            .last()
            .is_some_and(|&c| c != IMAGE_CHANNELS)
        {
            v.push(format!(
                "the last decoder block must output {IMAGE_CHANNELS} channels"
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        let hidden = self.decoder_filters.len().saturating_sub(1);
        if let Some(b) = self.dropout_blocks.iter().find(|&&b| b >= hidden) {
            v.push(format!(
                "dropout block {b} is not a hidden decoder block (0..{hidden})"
            ));
        }
        v
    }

    pub fn discriminator_violations(&self) -> Vec<String> {
        let mut v = self.common_violations();
        if !self.decoder_filters.is_empty() {
            v.push("a discriminator has no decoder_filters".to_string());
        }
        v
    }

    fn check(violations: Vec<String>) -> Result<()> {
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(violations))
        }
    }

    pub fn validate_generator(&self) -> Result<()> {
        Self::check(self.generator_violations())
    }

    pub fn validate_discriminator(&self) -> Result<()> {
        Self::check(self.discriminator_violations())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Activation {
    LeakyRelu(Real),
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    weight: usize,
    bias: usize,
    norm: Option<Norm>,
    transposed: bool,
    stride: usize,
    padding: usize,
    output_padding: usize,
    activation: Activation,
    dropout: bool,
}

/// Parameter leaves of one network on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    /// Binds externally recorded leaves, one per parameter in order.
    pub fn new(vars: Vec<Var>, trainable: bool) -> Self {
        Bound { vars, trainable }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-call forward settings.
pub struct ForwardCtx<'a, R: Rng + ?Sized> {
    /// Whether train-mode batch statistics are folded into the running stats.
    pub update_stats: bool,
    pub rng: &'a mut R,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub role: Role,
    pub spec: NetworkSpec,
    /// Square input side the discriminator head was sized for.
    pub input_size: Option<usize>,
    pub parameters: Vec<Parameter>,
    /// Batch-norm running statistics, by layer name.
    pub buffers: Vec<(String, RunningStats)>,
    pub mode: Mode,
    blocks: Vec<Block>,
}

struct Builder<'r, R: Rng + ?Sized> {
    rng: &'r mut R,
    normal: Normal<Real>,
    parameters: Vec<Parameter>,
    buffers: Vec<(String, RunningStats)>,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn param(&mut self, name: String, value: Tensor) -> usize {
        self.parameters.push(Parameter::new(name, value));
        self.parameters.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        transposed: bool,
        normalized: bool,
        activation: Activation,
        stride: usize,
        padding: usize,
    ) -> Block {
        let shape = if transposed {
            [in_c, out_c, kernel, kernel]
        } else {
            [out_c, in_c, kernel, kernel]
        };
        let normal = self.normal;
        let w = Tensor::from_fn(&shape, |_| normal.sample(self.rng));
        let weight = self.param(format!("{name}.weight"), w);
        let bias = self.param(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        let norm = normalized.then(|| {
            let gamma = self.param(format!("{name}.bn.gamma"), Tensor::ones(&[out_c]));
            let beta = self.param(format!("{name}.bn.beta"), Tensor::zeros(&[out_c]));
            self.buffers
                .push((format!("{name}.bn"), RunningStats::new(out_c)));
            Norm {
                gamma,
                beta,
                stats: self.buffers.len() - 1,
            }
        });
        Block {
            weight,
            bias,
            norm,
            transposed,
            stride,
            padding,
            output_padding: if transposed { stride - 1 } else { 0 },
            activation,
            dropout: false,
        }
    }
}

/// Builds the encoder-decoder generator with `N(0, 0.02^2)` weights, zero
/// biases and identity batch norms.
pub fn build_generator<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Network> {
    spec.validate_generator()?;
    let mut b = Builder {
        rng,
        normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        parameters: Vec::new(),
        buffers: Vec::new(),
    };
    let (k, s, pad) = (spec.kernel, spec.stride, spec.kernel / 2);
    let lrelu = Activation::LeakyRelu(spec.leak);
    let n = spec.depth();
    let mut blocks = Vec::new();
    let mut in_c = IMAGE_CHANNELS;
    for (i, &out_c) in spec.encoder_filters.iter().enumerate() {
        let norm = i > 0 || spec.normalize_first_layer;
        blocks.push(b.block(
            &format!("enc{i}"),
            in_c,
            out_c,
            k,
            false,
            norm,
            lrelu,
            s,
            pad,
        ));
        in_c = out_c;
    }
    for (i, &out_c) in spec.decoder_filters.iter().enumerate() {
        if i > 0 {
            in_c += spec.encoder_filters[n - 1 - i];
        }
        let last = i == n - 1;
        let act = if last { Activation::Tanh } else { lrelu };
        let mut block = b.block(&format!("dec{i}"), in_c, out_c, k, true, !last, act, s, pad);
        block.dropout = spec.dropout_blocks.contains(&i) && spec.dropout_rate > 0.0;
        blocks.push(block);
        in_c = out_c;
    }
    Ok(Network {
        role: Role::Generator,
        spec: spec.clone(),
        input_size: None,
        parameters: b.parameters,
        buffers: b.buffers,
        mode: Mode::Train,
        blocks,
    })
}

/// Builds the conditional discriminator for square `input_size` images.
pub fn build_discriminator<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    input_size: usize,
    rng: &mut R,
) -> Result<Network> {
    spec.validate_discriminator()?;
    let div = spec.divisor();
    if input_size == 0 || !input_size.is_multiple_of(div) {
        return Err(Error::config(format!(
            "discriminator input size {input_size} is not a positive multiple of {div}"
        )));
    }
    let grid = input_size / div;
    let mut b = Builder {
        rng,
        normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        parameters: Vec::new(),
        buffers: Vec::new(),
    };
    let (k, s, pad) = (spec.kernel, spec.stride, spec.kernel / 2);
    let lrelu = Activation::LeakyRelu(spec.leak);
    let mut blocks = Vec::new();
    let mut in_c = 2 * IMAGE_CHANNELS;
    for (i, &out_c) in spec.encoder_filters.iter().enumerate() {
        let norm = i > 0 || spec.normalize_first_layer;
        blocks.push(b.block(
            &format!("conv{i}"),
            in_c,
            out_c,
            k,
            false,
            norm,
            lrelu,
            s,
            pad,
        ));
        in_c = out_c;
    }
    blocks.push(b.block(
        "head",
        in_c,
        1,
        grid,
        false,
        false,
        Activation::Sigmoid,
        1,
        0,
    ));
    Ok(Network {
        role: Role::Discriminator,
        spec: spec.clone(),
        input_size: Some(input_size),
        parameters: b.parameters,
        buffers: b.buffers,
        mode: Mode::Train,
        blocks,
    })
}

impl Network {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters.iter().map(|p| p.value.len()).sum()
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.parameters.iter_mut().find(|p| p.name == name)
    }

    /// Records every parameter as a leaf; gradients flow into them only when
    /// `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .parameters
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
            trainable,
        }
    }

    /// Moves gradients from a backward pass into the parameters.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for (p, &v) in self.parameters.iter_mut().zip(&bound.vars) {
            match grads.take(v) {
                Some(g) => p.accumulate_grad(g)?,
                None if bound.trainable => p.accumulate_grad(Tensor::zeros(p.value.shape()))?,
                None => {}
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.parameters.iter_mut().for_each(Parameter::zero_grad);
    }

    fn apply_block<R: Rng + ?Sized>(
        &mut self,
        index: usize,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx<'_, R>,
    ) -> Result<Var> {
        let block = self.blocks[index].clone();
        let tag = |e: Error| match e {
            Error::Dimension(m) => Error::Dimension(format!("block {index}: {m}")),
            Error::Config(m) => Error::Config(format!("block {index}: {m}")),
            other => other,
        };
        let (w, b) = (bound.vars[block.weight], bound.vars[block.bias]);
        let mut y = if block.transposed {
            tape.conv_transpose2d(x, w, b, block.stride, block.padding, block.output_padding)
        } else {
            tape.conv2d(x, w, b, block.stride, block.padding)
        }
        .map_err(tag)?;
        if let Some(norm) = block.norm {
            let (g, be) = (bound.vars[norm.gamma], bound.vars[norm.beta]);
            let stats = &mut self.buffers[norm.stats].1;
            y = if ctx.update_stats || self.mode == Mode::Infer {
                tape.batch_norm(y, g, be, self.mode, stats)
            } else {
                tape.batch_norm(y, g, be, self.mode, &mut stats.clone())
            }
            .map_err(tag)?;
        }
        y = match block.activation {
            Activation::LeakyRelu(a) => tape.leaky_relu(y, a)?,
            Activation::Tanh => tape.tanh(y),
            Activation::Sigmoid => tape.sigmoid(y),
        };
        if block.dropout {
            y = tape.dropout(y, self.spec.dropout_rate, self.mode, ctx.rng)?;
        }
        Ok(y)
    }

    /// Generator forward: `blurry` in `[-1, 1]`, `(n, 3, h, w)` with `h` and
    /// `w` multiples of [`NetworkSpec::divisor`].
    pub fn generate<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        blurry: Var,
        ctx: &mut ForwardCtx<'_, R>,
    ) -> Result<Var> {
        if self.role != Role::Generator {
            return Err(Error::config("generate() called on a discriminator"));
        }
        let (_, c, h, w) = tape.value(blurry).dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::dim(format!(
                "generator expects {IMAGE_CHANNELS} channels, got {c}"
            )));
        }
        let div = self.spec.divisor();
        if h % div != 0 || w % div != 0 {
            let s = self.spec.stride;
            let bad = (0..self.spec.depth())
                .find(|&i| {
                    !(h / s.pow(i as u32)).is_multiple_of(s)
                        || !(w / s.pow(i as u32)).is_multiple_of(s)
                })
                .unwrap_or(0);
            return Err(Error::config(format!(
                "block {bad}: input {h}x{w} is not divisible by {div} (stride {s} over {} blocks)",
                self.spec.depth()
            )));
        }
        let n = self.spec.depth();
        let mut skips = Vec::with_capacity(n);
        let mut x = blurry;
        for i in 0..n {
            x = self.apply_block(i, tape, bound, x, ctx)?;
            skips.push(x);
        }
        for i in 0..n {
            if i > 0 {
                x = tape.concat_channels(x, skips[n - 1 - i])?;
            }
            x = self.apply_block(n + i, tape, bound, x, ctx)?;
        }
        Ok(x)
    }

    /// Discriminator forward on a `(candidate, blurry)` pair; returns one
    /// probability per batch item, shape `(n, 1, 1, 1)`.
    pub fn discriminate<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        candidate: Var,
        blurry: Var,
        ctx: &mut ForwardCtx<'_, R>,
    ) -> Result<Var> {
        if self.role != Role::Discriminator {
            return Err(Error::config("discriminate() called on a generator"));
        }
        let size = self.input_size.expect("discriminator has an input size");
        let (_, _, h, w) = tape.value(candidate).dims4()?;
        if (h, w) != (size, size) {
            return Err(Error::dim(format!(
                "discriminator built for {size}x{size} inputs, got {h}x{w}"
            )));
        }
        let mut x = tape.concat_channels(candidate, blurry)?;
        for i in 0..self.blocks.len() {
            x = self.apply_block(i, tape, bound, x, ctx)?;
        }
        Ok(x)
    }

    /// Binds trainable parameters and runs the role's forward pass. A
    /// generator takes `[blurry]`, a discriminator `[candidate, blurry]`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        inputs: &[Var],
        rng: &mut R,
    ) -> Result<(Var, Bound)> {
        let bound = self.bind(tape, true);
        let mut ctx = ForwardCtx {
            update_stats: true,
            rng,
        };
        let out = match (self.role, inputs) {
            (Role::Generator, [blurry]) => self.generate(tape, &bound, *blurry, &mut ctx)?,
            (Role::Discriminator, [candidate, blurry]) => {
                self.discriminate(tape, &bound, *candidate, *blurry, &mut ctx)?
            }
            (role, _) => {
                return Err(Error::config(format!(
                    "{role:?} forward got {} inputs",
                    inputs.len()
                )))
            }
        };
        Ok((out, bound))
    }

    /// Runs the generator in infer mode on one `(n, 3, h, w)` image in
    /// `[0, 1]` of any size. The input is reflect-padded up to the next
    /// multiple of the divisor and the output cropped back.
    pub fn restore(&mut self, blurry01: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = blurry01.dims4()?;
        let div = self.spec.divisor();
        let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
        let padded = reflect_pad(blurry01, ph, pw)?.map(|v| 2.0 * v - 1.0);
        let previous = self.mode;
        self.mode = Mode::Infer;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(padded);
        let mut rng = crate::rng::seeded(0);
        let mut ctx = ForwardCtx {
            update_stats: false,
            rng: &mut rng,
        };
        let out = self.generate(&mut tape, &bound, x, &mut ctx);
        self.mode = previous;
        let out = tape.value(out?).map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
        crop(&out, 0, 0, h, w)
    }

    /// Rounds parameters, moments and running statistics to `f32`.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.parameters {
            p.value.quantize_f32();
            for v in p.first_moment.iter_mut().chain(p.second_moment.iter_mut()) {
                *v = *v as f32 as Real;
            }
        }
        for (_, s) in &mut self.buffers {
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = *v as f32 as Real;
            }
        }
    }
}

/// Reflect-pads the bottom and right edges of an image tensor.
pub fn reflect_pad(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    if height < h || width < w || height > 2 * h - 1 || width > 2 * w - 1 {
        if height == h && width == w {
            return Ok(image.clone());
        }
        return Err(Error::dim(format!(
            "cannot reflect-pad {h}x{w} to {height}x{width}"
        )));
    }
    let reflect = |i: usize, size: usize| if i < size { i } else { 2 * (size - 1) - i };
    let mut out = Vec::with_capacity(n * c * height * width);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..height {
                for x in 0..width {
                    out.push(image.at4(b, ch, reflect(y, h), reflect(x, w)));
                }
            }
        }
    }
    Tensor::new(vec![n, c, height, width], out)
}

/// Copies the `height x width` window at `(top, left)`.
pub fn crop(
    image: &Tensor,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    if top + height > h || left + width > w {
        return Err(Error::dim(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(n * c * height * width);
    for b in 0..n {
        for ch in 0..c {
            for y in top..top + height {
                let row = ((b * c + ch) * h + y) * w;
                out.extend_from_slice(&image.data()[row + left..row + left + width]);
            }
        }
    }
    Tensor::new(vec![n, c, height, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn default_specs_are_valid() {
        let g = NetworkSpec::default_generator();
        assert_eq!(g.decoder_filters, vec![256, 128, 64, 3]);
        assert_eq!(g.dropout_blocks, vec![0, 1]);
        g.validate_generator().unwrap();
        NetworkSpec::default_discriminator()
            .validate_discriminator()
            .unwrap();
    }

    #[test]
    fn invalid_specs_list_every_violation() {
        let mut s = NetworkSpec::generator(&[8, 16]);
        s.kernel = 4;
        s.decoder_filters = vec![8, 16, 3];
        s.leak = 1.5;
        let Err(Error::InvalidConfig(v)) = s.validate_generator() else {
            panic!("expected invalid config");
        };
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn generator_mirrors_shapes() {
        let spec = NetworkSpec::generator(&[4, 8]);
        let mut r = rng::seeded(1);
        let mut g = build_generator(&spec, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 3, 12, 8], -1.0, 1.0, &mut r));
        let (y, _) = g.forward(&mut tape, &[x], &mut r).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 12, 8]);
        assert!(tape.value(y).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn indivisible_input_names_a_block() {
        let spec = NetworkSpec::generator(&[4, 8, 8]);
        let mut r = rng::seeded(1);
        let mut g = build_generator(&spec, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 12, 12]));
        let err = g.forward(&mut tape, &[x], &mut r).unwrap_err();
        assert!(err.to_string().contains("block 2"), "{err}");
    }

    #[test]
    fn discriminator_scores_in_unit_interval() {
        let spec = NetworkSpec::discriminator(&[4, 8]);
        let mut r = rng::seeded(3);
        let mut d = build_discriminator(&spec, 16, &mut r).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::uniform(&[3, 3, 16, 16], -1.0, 1.0, &mut r));
        let b = tape.constant(Tensor::uniform(&[3, 3, 16, 16], -1.0, 1.0, &mut r));
        let (y, _) = d.forward(&mut tape, &[a, b], &mut r).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 1, 1, 1]);
        assert!(tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(build_discriminator(&spec, 18, &mut r).is_err());
    }

    #[test]
    fn reflect_pad_and_crop() {
        let img = Tensor::from_fn(&[1, 1, 3, 3], |i| i as Real);
        let p = reflect_pad(&img, 5, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 5, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 2.0, 1.0]);
        assert_eq!(&p.data()[12..16], &[3.0, 4.0, 5.0, 4.0]); // row 3 mirrors row 1
        assert_eq!(crop(&p, 0, 0, 3, 3).unwrap(), img);
        assert!(crop(&p, 3, 0, 3, 3).is_err());
    }
}

//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its output value and whatever forward
//! context its backward pass needs (argmin indices, normalized activations,
//! dropout masks). Nodes only reference earlier nodes, so the node order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::borrow::Cow;

use rand::Rng;

use crate::conv::{self, Geometry};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_EPS: Real = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: Real = 0.9;

/// Per-channel running mean/variance of a batch-norm layer. Empty until
/// populated (either explicitly or by the first train-mode pass).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

impl RunningStats {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn update(&mut self, mean: &[Real], var: &[Real]) {
        if self.is_empty() {
            self.mean = mean.to_vec();
            self.var = var.to_vec();
            return;
        }
        for (r, &m) in self.mean.iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in self.var.iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// Kind of a recorded operation, for inspecting what a tape contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    BatchNorm,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Dropout,
    MinPool,
    ConcatChannels,
    ConcatBatch,
    NarrowBatch,
    MeanAbsDiff,
    MeanSqDiff,
    Clamp,
    Log,
    Affine,
    Add,
    Mean,
    Sum,
    DotConst,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<Real>,
        inv_std: Vec<Real>,
        batch_stats: bool,
    },
    LeakyRelu {
        input: Var,
        alpha: Real,
    },
    Sigmoid {
        input: Var,
    },
    Tanh {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<Real>,
    },
    MinPool {
        input: Var,
        argmin: Vec<usize>,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    ConcatBatch {
        a: Var,
        b: Var,
    },
    NarrowBatch {
        input: Var,
        start: usize,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    MeanSqDiff {
        a: Var,
        b: Var,
    },
    Clamp {
        input: Var,
        lo: Real,
        hi: Real,
    },
    Log {
        input: Var,
    },
    Affine {
        input: Var,
        scale: Real,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mean {
        input: Var,
    },
    Sum {
        input: Var,
    },
    DotConst {
        input: Var,
        weights: Tensor,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::MinPool { .. } => OpKind::MinPool,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::ConcatBatch { .. } => OpKind::ConcatBatch,
            Op::NarrowBatch { .. } => OpKind::NarrowBatch,
            Op::MeanAbsDiff { .. } => OpKind::MeanAbsDiff,
            Op::MeanSqDiff { .. } => OpKind::MeanSqDiff,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Log { .. } => OpKind::Log,
            Op::Affine { .. } => OpKind::Affine,
            Op::Add { .. } => OpKind::Add,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::DotConst { .. } => OpKind::DotConst,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::ConcatChannels { a, b }
            | Op::ConcatBatch { a, b }
            | Op::MeanAbsDiff { a, b }
            | Op::MeanSqDiff { a, b }
            | Op::Add { a, b } => vec![a, b],
            Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::Tanh { input }
            | Op::Dropout { input, .. }
            | Op::MinPool { input, .. }
            | Op::NarrowBatch { input, .. }
            | Op::Clamp { input, .. }
            | Op::Log { input }
            | Op::Affine { input, .. }
            | Op::Mean { input }
            | Op::Sum { input }
            | Op::DotConst { input, .. } => vec![input],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not influence the loss through a
    /// gradient-requiring path.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Flat input indices selected by a min-pool node, one per output element.
    pub fn argmin(&self, var: Var) -> Option<&[usize]> {
        match &self.nodes[var.0].op {
            Op::MinPool { argmin, .. } => Some(argmin),
            _ => None,
        }
    }

    /// Branch taken at every non-smooth point on the tape: LeakyReLU input
    /// signs, L1 difference signs, clamp regions and min-pool winners. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let sign = |v: Real| u64::from(v > 0.0);
        for node in &self.nodes {
            match &node.op {
                &Op::LeakyRelu { input, .. } => {
                    out.extend(self.value(input).data().iter().map(|&v| sign(v)));
                }
                &Op::MeanAbsDiff { a, b } => out.extend(
                    self.value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(x, y)| sign(x - y)),
                ),
                &Op::Clamp { input, lo, hi } => out.extend(
                    self.value(input)
                        .data()
                        .iter()
                        .map(|&v| u64::from(v < lo) + 2 * u64::from(v > hi)),
                ),
                Op::MinPool { argmin, .. } => out.extend(argmin.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        out
    }

    /// Records a value computed outside the tape as a constant with the same
    /// value as `var`: a stop-gradient.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, input: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let value = self.value(input).map(f);
        self.push(value, op)
    }

    // ---------------------------------------------------------------- conv

    /// 2-D cross-correlation. `weight` is `(out, in, k, k)`, `bias` is `(out)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (g, n, out_c) = self.conv_geometry(input, weight, bias, stride, padding, false, 0)?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let (rows, ncol) = (g.col_rows(), g.col_cols());
        let in_size = g.channels * g.height * g.width;
        let mut out = vec![0.0; n * out_c * ncol];
        let mut cols = vec![0.0; rows * ncol];
        for item in 0..n {
            conv::im2col(&x[item * in_size..(item + 1) * in_size], &g, &mut cols);
            let dst = &mut out[item * out_c * ncol..(item + 1) * out_c * ncol];
            conv::gemm(out_c, rows, ncol, w, false, &cols, false, 0.0, dst);
            for (o, plane) in dst.chunks_mut(ncol).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
        let value = Tensor::new(vec![n, out_c, g.out_h, g.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Adjoint of [`Tape::conv2d`]. `weight` is `(in, out, k, k)`, `bias` is
    /// `(out)`. Output size is `(h - 1) * stride - 2 * padding + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (g, n, in_c) =
            self.conv_geometry(input, weight, bias, stride, padding, true, output_padding)?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let (rows, ncol) = (g.col_rows(), g.col_cols());
        let out_size = g.channels * g.height * g.width;
        let plane = g.height * g.width;
        let mut out = vec![0.0; n * out_size];
        let mut cols = vec![0.0; rows * ncol];
        for item in 0..n {
            let src = &x[item * in_c * ncol..(item + 1) * in_c * ncol];
            conv::gemm(rows, in_c, ncol, w, true, src, false, 0.0, &mut cols);
            let dst = &mut out[item * out_size..(item + 1) * out_size];
            conv::col2im(&cols, &g, dst);
            for (o, p) in dst.chunks_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v += b[o]);
            }
        }
        let value = Tensor::new(vec![n, g.channels, g.height, g.width], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Validates a conv call. Returns the im2col geometry over the *large*
    /// image (the input for conv2d, the output for the transposed conv), the
    /// batch size and the channel count of the *small* side.
    #[allow(clippy::too_many_arguments)]
    fn conv_geometry(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        transposed: bool,
        output_padding: usize,
    ) -> Result<(Geometry, usize, usize)> {
        let what = if transposed {
            "conv_transpose2d"
        } else {
            "conv2d"
        };
        if stride == 0 {
            return Err(Error::config(format!("{what}: stride must be >= 1")));
        }
        let (n, c, h, w) = self.value(input).dims4()?;
        let ws = self.value(weight).shape();
        let [w0, w1, k, k2] = *ws else {
            return Err(Error::dim(format!(
                "{what}: weight must be 4-D, got {ws:?}"
            )));
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "{what}: kernel must be square, got {ws:?}"
            )));
        }
        let (in_c, out_c) = if transposed { (w0, w1) } else { (w1, w0) };
        if c != in_c {
            return Err(Error::dim(format!(
                "{what}: input has {c} channels but weight {ws:?} expects {in_c}"
            )));
        }
        if self.value(bias).shape() != [out_c] {
            return Err(Error::dim(format!(
                "{what}: bias shape {:?} does not match {out_c} output channels",
                self.value(bias).shape()
            )));
        }
        if transposed {
            if output_padding >= stride {
                return Err(Error::config(format!(
                    "{what}: output_padding {output_padding} must be smaller than stride {stride}"
                )));
            }
            let oh = conv::conv_transpose_out_size(h, k, stride, padding, output_padding);
            let ow = conv::conv_transpose_out_size(w, k, stride, padding, output_padding);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::dim(format!(
                    "{what}: padding {padding} too large for {h}x{w} input and kernel {k}"
                )));
            };
            if oh == 0 || ow == 0 {
                return Err(Error::dim(format!(
                    "{what}: empty output for {h}x{w} input"
                )));
            }
            let g = Geometry {
                channels: out_c,
                height: oh,
                width: ow,
                kernel: k,
                stride,
                padding,
                out_h: h,
                out_w: w,
            };
            Ok((g, n, in_c))
        } else {
            let oh = conv::conv_out_size(h, k, stride, padding);
            let ow = conv::conv_out_size(w, k, stride, padding);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::dim(format!(
                    "{what}: kernel {k} larger than padded {h}x{w} input (padding {padding})"
                )));
            };
            let g = Geometry {
                channels: c,
                height: h,
                width: w,
                kernel: k,
                stride,
                padding,
                out_h: oh,
                out_w: ow,
            };
            Ok((g, n, out_c))
        }
    }

    // ---------------------------------------------------------- batch norm

    /// Per-channel batch normalization over `(batch, height, width)`.
    ///
    /// In train mode the batch statistics are used and folded into `stats`
    /// with momentum [`BN_MOMENTUM`]; in infer mode `stats` must be populated.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(format!(
                    "batch_norm: {name} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        let x = self.value(input).data();
        let plane = h * w;
        let count = (n * plane) as Real;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for item in 0..n {
                        let off = (item * c + ch) * plane;
                        s += x[off..off + plane].iter().sum::<Real>();
                    }
                    let m = s / count;
                    let mut s2 = 0.0;
                    for item in 0..n {
                        let off = (item * c + ch) * plane;
                        s2 += x[off..off + plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<Real>();
                    }
                    mean[ch] = m;
                    var[ch] = s2 / count;
                }
                (mean, var)
            }
            Mode::Infer => {
                if stats.is_empty() {
                    return Err(Error::State(
                        "batch_norm in infer mode without running statistics".into(),
                    ));
                }
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(Error::dim(format!(
                        "batch_norm: running statistics hold {} channels, input has {c}",
                        stats.mean.len()
                    )));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for item in 0..n {
            for ch in 0..c {
                let off = (item * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        if mode == Mode::Train {
            stats.update(&mean, &var);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    // --------------------------------------------------------- elementwise

    pub fn leaky_relu(&mut self, input: Var, alpha: Real) -> Result<Var> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!(
                "leaky_relu: alpha {alpha} not in (0, 1)"
            )));
        }
        Ok(self.unary(
            input,
            |x| if x > 0.0 { x } else { alpha * x },
            Op::LeakyRelu { input, alpha },
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, stable_sigmoid, Op::Sigmoid { input })
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, Real::tanh, Op::Tanh { input })
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: Real,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout: rate {rate} not in [0, 1)")));
        }
        let len = self.value(input).len();
        let mask: Vec<Real> = if mode == Mode::Infer || rate == 0.0 {
            vec![1.0; len]
        } else {
            let keep = 1.0 / (1.0 - rate);
            (0..len)
                .map(|_| {
                    if rng.random::<Real>() < rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect()
        };
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        Ok(self.push(value, Op::Dropout { input, mask }))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, input: Var, lo: Real, hi: Real) -> Var {
        self.unary(input, |x| x.clamp(lo, hi), Op::Clamp { input, lo, hi })
    }

    pub fn log(&mut self, input: Var) -> Var {
        self.unary(input, Real::ln, Op::Log { input })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: Real, shift: Real) -> Var {
        self.unary(input, |x| scale * x + shift, Op::Affine { input, scale })
    }

    pub fn scale(&mut self, input: Var, factor: Real) -> Var {
        self.affine(input, factor, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    // ------------------------------------------------------------- reshape

    /// Stacks `a` and `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::dim(format!(
                "concat_channels: {:?} and {:?} differ in batch or spatial size",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for item in 0..na {
            out.extend_from_slice(&da[item * ca * plane..(item + 1) * ca * plane]);
            out.extend_from_slice(&db[item * cb * plane..(item + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::ConcatChannels { a, b }))
    }

    /// Stacks `a` and `b` along the batch axis.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::stack_batch(&[self.value(a).clone(), self.value(b).clone()])?;
        Ok(self.push(value, Op::ConcatBatch { a, b }))
    }

    /// Batch items `start..start + len`.
    pub fn narrow_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).batch_slice(start, len)?;
        Ok(self.push(value, Op::NarrowBatch { input, start }))
    }

    // ------------------------------------------------------------ min pool

    /// Per-pixel minimum over channels followed by a `window x window`
    /// minimum filter with edge replication. Output is `(n, 1, h, w)`.
    ///
    /// Ties resolve to the lowest `(channel, row, col)` source, so the
    /// gradient routing is deterministic.
    pub fn min_pool_channels_window(&mut self, input: Var, window: usize) -> Result<Var> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "min pool window must be a positive odd integer, got {window}"
            )));
        }
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let data = x.data();
        let plane = h * w;
        let r = window / 2;
        let better = |a: usize, b: usize| -> bool { (data[a], a) < (data[b], b) };

        let mut argmin = vec![0usize; n * plane];
        let mut chan = vec![0usize; plane];
        let mut rows = vec![0usize; plane];
        for item in 0..n {
            let base = item * c * plane;
            for (p, slot) in chan.iter_mut().enumerate() {
                let mut best = base + p;
                for ch in 1..c {
                    let cand = base + ch * plane + p;
                    if better(cand, best) {
                        best = cand;
                    }
                }
                *slot = best;
            }
            // horizontal then vertical pass; min over a total order is separable
            for y in 0..h {
                for xx in 0..w {
                    let lo = xx.saturating_sub(r);
                    let hi = (xx + r).min(w - 1);
                    let mut best = chan[y * w + lo];
                    for q in lo + 1..=hi {
                        if better(chan[y * w + q], best) {
                            best = chan[y * w + q];
                        }
                    }
                    rows[y * w + xx] = best;
                }
            }
            for y in 0..h {
                let lo = y.saturating_sub(r);
                let hi = (y + r).min(h - 1);
                for xx in 0..w {
                    let mut best = rows[lo * w + xx];
                    for q in lo + 1..=hi {
                        if better(rows[q * w + xx], best) {
                            best = rows[q * w + xx];
                        }
                    }
                    argmin[item * plane + y * w + xx] = best;
                }
            }
        }
        let out = argmin.iter().map(|&i| data[i]).collect();
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(value, Op::MinPool { input, argmin }))
    }

    // ---------------------------------------------------------- reductions

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).zip_map(self.value(b), |x, y| (x - y).abs())?;
        Ok(self.push(Tensor::scalar(d.mean()), Op::MeanAbsDiff { a, b }))
    }

    /// Mean squared difference over all elements.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self
            .value(a)
            .zip_map(self.value(b), |x, y| (x - y) * (x - y))?;
        Ok(self.push(Tensor::scalar(d.mean()), Op::MeanSqDiff { a, b }))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input).mean();
        self.push(Tensor::scalar(v), Op::Mean { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let v = self.value(input).sum();
        self.push(Tensor::scalar(v), Op::Sum { input })
    }

    /// `sum(input * weights)` for a constant `weights`; a random projection
    /// of a tensor-valued output down to a scalar.
    pub fn dot_const(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        let v = self.value(input).dot(&weights)?;
        Ok(self.push(Tensor::scalar(v), Op::DotConst { input, weights }))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node,
        upstream: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let dy = upstream.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (g, n, out_c) =
                    self.conv_geometry(input, weight, bias, stride, padding, false, 0)?;
                let x = self.value(input).data();
                let w = self.value(weight).data();
                let (rows, ncol) = (g.col_rows(), g.col_cols());
                let in_size = g.channels * g.height * g.width;
                let mut dx = self.wants(input).then(|| vec![0.0; x.len()]);
                let mut dw = self.wants(weight).then(|| vec![0.0; w.len()]);
                let mut cols = vec![0.0; rows * ncol];
                let mut dcols = vec![0.0; rows * ncol];
                for item in 0..n {
                    let dy_item = &dy[item * out_c * ncol..(item + 1) * out_c * ncol];
                    if let Some(dw) = dw.as_mut() {
                        conv::im2col(&x[item * in_size..(item + 1) * in_size], &g, &mut cols);
                        conv::gemm(out_c, ncol, rows, dy_item, false, &cols, true, 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        conv::gemm(rows, out_c, ncol, w, true, dy_item, false, 0.0, &mut dcols);
                        conv::col2im(&dcols, &g, &mut dx[item * in_size..(item + 1) * in_size]);
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, input, self.value(input).shape(), dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, weight, self.value(weight).shape(), dw);
                }
                if self.wants(bias) {
                    let db = channel_sums(dy, n, out_c, ncol);
                    accumulate(grads, bias, &[out_c], db);
                }
            }
            &Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let (_, _, h, _) = self.value(input).dims4()?;
                let k = self.value(weight).shape()[2];
                let output_padding = oh + 2 * padding - (h - 1) * stride - k;
                let (g, n, in_c) =
                    self.conv_geometry(input, weight, bias, stride, padding, true, output_padding)?;
                debug_assert_eq!((g.height, g.width), (oh, ow));
                let x = self.value(input).data();
                let w = self.value(weight).data();
                let (rows, ncol) = (g.col_rows(), g.col_cols());
                let out_size = g.channels * g.height * g.width;
                let mut dx = self.wants(input).then(|| vec![0.0; x.len()]);
                let mut dw = self.wants(weight).then(|| vec![0.0; w.len()]);
                let mut dcols = vec![0.0; rows * ncol];
                for item in 0..n {
                    conv::im2col(&dy[item * out_size..(item + 1) * out_size], &g, &mut dcols);
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx[item * in_c * ncol..(item + 1) * in_c * ncol];
                        conv::gemm(in_c, rows, ncol, w, false, &dcols, false, 0.0, dst);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let src = &x[item * in_c * ncol..(item + 1) * in_c * ncol];
                        conv::gemm(in_c, ncol, rows, src, false, &dcols, true, 1.0, dw);
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, input, self.value(input).shape(), dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, weight, self.value(weight).shape(), dw);
                }
                if self.wants(bias) {
                    let db = channel_sums(dy, n, g.channels, g.height * g.width);
                    accumulate(grads, bias, &[g.channels], db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let count = (n * plane) as Real;
                let gm = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for item in 0..n {
                    for ch in 0..c {
                        let off = (item * c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * normalized[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; dy.len()];
                    for item in 0..n {
                        for ch in 0..c {
                            let off = (item * c + ch) * plane;
                            let scale = gm[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *batch_stats {
                                    scale
                                        * (dy[i]
                                            - sum_dy[ch] / count
                                            - normalized[i] * sum_dy_xhat[ch] / count)
                                } else {
                                    scale * dy[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *input, node.value.shape(), dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, &[c], sum_dy_xhat);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, &[c], sum_dy);
                }
            }
            &Op::LeakyRelu { input, alpha } => {
                let x = self.value(input).data();
                let dx: Vec<Real> = x
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { alpha * g })
                    .collect();
                accumulate(grads, input, node.value.shape(), dx);
            }
            &Op::Sigmoid { input } => {
                let y = node.value.data();
                let dx: Vec<Real> = y.iter().zip(dy).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                accumulate(grads, input, node.value.shape(), dx);
            }
            &Op::Tanh { input } => {
                let y = node.value.data();
                let dx: Vec<Real> = y.iter().zip(dy).map(|(&t, &g)| g * (1.0 - t * t)).collect();
                accumulate(grads, input, node.value.shape(), dx);
            }
            Op::Dropout { input, mask } => {
                let dx: Vec<Real> = mask.iter().zip(dy).map(|(m, g)| m * g).collect();
                accumulate(grads, *input, node.value.shape(), dx);
            }
            Op::MinPool { input, argmin } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (&src, &g) in argmin.iter().zip(dy) {
                    dx[src] += g;
                }
                accumulate(grads, *input, self.value(*input).shape(), dx);
            }
            &Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(a).dims4()?;
                let cb = self.value(b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for item in 0..n {
                    let off = item * (ca + cb) * plane;
                    da.extend_from_slice(&dy[off..off + ca * plane]);
                    db.extend_from_slice(&dy[off + ca * plane..off + (ca + cb) * plane]);
                }
                if self.wants(a) {
                    accumulate(grads, a, self.value(a).shape(), da);
                }
                if self.wants(b) {
                    accumulate(grads, b, self.value(b).shape(), db);
                }
            }
            &Op::ConcatBatch { a, b } => {
                let split = self.value(a).len();
                if self.wants(a) {
                    accumulate(grads, a, self.value(a).shape(), &dy[..split]);
                }
                if self.wants(b) {
                    accumulate(grads, b, self.value(b).shape(), &dy[split..]);
                }
            }
            &Op::NarrowBatch { input, start } => {
                let src = self.value(input);
                let per: usize = src.shape()[1..].iter().product();
                let mut dx = vec![0.0; src.len()];
                dx[start * per..start * per + dy.len()].copy_from_slice(dy);
                accumulate(grads, input, src.shape(), dx);
            }
            &Op::MeanAbsDiff { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let scale = dy[0] / va.len() as Real;
                let da: Vec<Real> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate_pair(grads, a, b, da);
            }
            &Op::MeanSqDiff { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let scale = 2.0 * dy[0] / va.len() as Real;
                let da: Vec<Real> = va.iter().zip(vb).map(|(x, y)| scale * (x - y)).collect();
                self.accumulate_pair(grads, a, b, da);
            }
            &Op::Clamp { input, lo, hi } => {
                let x = self.value(input).data();
                let dx: Vec<Real> = x
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v >= lo && v <= hi { g } else { 0.0 })
                    .collect();
                accumulate(grads, input, node.value.shape(), dx);
            }
            &Op::Log { input } => {
                let x = self.value(input).data();
                let dx: Vec<Real> = x.iter().zip(dy).map(|(&v, &g)| g / v).collect();
                accumulate(grads, input, node.value.shape(), dx);
            }
            &Op::Affine { input, scale } => {
                let dx: Vec<Real> = dy.iter().map(|g| g * scale).collect();
                accumulate(grads, input, node.value.shape(), dx);
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, node.value.shape(), dy);
                }
                if self.wants(b) {
                    accumulate(grads, b, node.value.shape(), dy);
                }
            }
            &Op::Mean { input } => {
                let src = self.value(input);
                let g = dy[0] / src.len() as Real;
                accumulate(grads, input, src.shape(), vec![g; src.len()]);
            }
            &Op::Sum { input } => {
                let src = self.value(input);
                accumulate(grads, input, src.shape(), vec![dy[0]; src.len()]);
            }
            Op::DotConst { input, weights } => {
                let dx: Vec<Real> = weights.data().iter().map(|w| w * dy[0]).collect();
                accumulate(grads, *input, weights.shape(), dx);
            }
        }
        Ok(())
    }

    /// Routes `da` to `a` and `-da` to `b`.
    fn accumulate_pair(&self, grads: &mut [Option<Tensor>], a: Var, b: Var, da: Vec<Real>) {
        let shape = self.value(a).shape();
        if self.wants(b) {
            let db: Vec<Real> = da.iter().map(|g| -g).collect();
            accumulate(grads, b, shape, db);
        }
        if self.wants(a) {
            accumulate(grads, a, shape, da);
        }
    }
}

fn accumulate<'a>(
    grads: &mut [Option<Tensor>],
    var: Var,
    shape: &[usize],
    delta: impl Into<Cow<'a, [Real]>>,
) {
    let delta = delta.into();
    match &mut grads[var.0] {
        Some(g) => g
            .data_mut()
            .iter_mut()
            .zip(delta.iter())
            .for_each(|(a, b)| *a += b),
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.into_owned()).expect("gradient shape"))
        }
    }
}

fn channel_sums(dy: &[Real], n: usize, c: usize, plane: usize) -> Vec<Real> {
    let mut out = vec![0.0; c];
    for item in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let off = (item * c + ch) * plane;
            *o += dy[off..off + plane].iter().sum::<Real>();
        }
    }
    out
}

/// `1 / (1 + e^-x)` without overflow for large `|x|`.
pub fn stable_sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

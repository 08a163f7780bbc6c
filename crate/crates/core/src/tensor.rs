//! Dense row-major tensors.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Scalar type used for all arithmetic. Gradient-check tolerances assume
/// double precision.
pub type Real = f64;

/// Dense N-dimensional array. Image tensors are `(batch, channels, height, width)`.
/// Clones share storage until one of them is written.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> Real) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(f).collect()),
        }
    }

    /// Samples i.i.d. `N(mean, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], mean: Real, std: Real, rng: &mut R) -> Self {
        let normal = Normal::new(mean, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    /// Samples i.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: Real, hi: Real, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<Real> {
        Arc::unwrap_or_clone(self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Splits an image tensor shape into `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!(
                "expected a 4-D (batch, channels, height, width) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn dot(&self, other: &Tensor) -> Result<Real> {
        self.expect_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Real {
        self.sum() / self.data.len() as Real
    }

    pub fn min(&self) -> Real {
        self.data.iter().copied().fold(Real::INFINITY, Real::min)
    }

    pub fn max(&self) -> Real {
        self.data
            .iter()
            .copied()
            .fold(Real::NEG_INFINITY, Real::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Real> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Element at `(n, c, y, x)` of a 4-D tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> Real {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * ch + c) * h + y) * w + x]
    }

    /// Copies batch items `start..start + len`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        let n = self.shape[0];
        if len == 0 || start + len > n {
            return Err(Error::dim(format!(
                "batch slice {start}..{} out of range for batch {n}",
                start + len
            )));
        }
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            shape,
            data: Arc::new(self.data[start * per..(start + len) * per].to_vec()),
        })
    }

    /// Stacks tensors with identical trailing shape along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack_batch of zero tensors"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::dim(format!(
                    "stack_batch: shapes {:?} and {:?} differ past the batch axis",
                    first.shape, t.shape
                )));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        shape[0] = batch;
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Rounds every element through `f32`, the checkpoint storage width.
    pub fn quantize_f32(&mut self) {
        for v in self.data_mut() {
            *v = *v as f32 as Real;
        }
    }
}

//! Trainable parameters and the Adam update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A named trainable tensor with its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub first_moment: Vec<Real>,
    pub second_moment: Vec<Real>,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Adds `grad` into the accumulated gradient.
    pub fn accumulate_grad(&mut self, grad: Tensor) -> Result<()> {
        self.value.expect_same_shape(&grad, &self.name)?;
        match &mut self.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(a, b)| *a += b),
            None => self.grad = Some(grad),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Bias-corrected Adam update, in place. Every parameter must carry a
    /// gradient; gradients are cleared afterwards.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!(
                "parameter `{}` has no accumulated gradient",
                p.name
            )));
        }
        for p in params {
            let grad = p.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let moments = p.first_moment.iter_mut().zip(p.second_moment.iter_mut());
            for ((value, &g), (m, v)) in p.value.data_mut().iter_mut().zip(grad.data()).zip(moments)
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *value -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
) -> Result<()> {
    Adam {
        lr,
        beta1,
        beta2,
        eps,
    }
    .step(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: Real) -> Parameter {
        Parameter::new("x", Tensor::scalar(x))
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Parameter::new("w", Tensor::from_fn(&[3], |i| i as Real));
        let before = p.value.clone();
        p.grad = Some(Tensor::zeros(&[3]));
        Adam::default().step([&mut p]).unwrap();
        assert_eq!(p.value, before);
        assert_eq!(p.step_count, 1);
        assert!(p.grad.is_none());
    }

    #[test]
    fn first_step_has_lr_magnitude() {
        // m_hat = g and v_hat = g^2 after one step, so the move is lr * g / (|g| + eps)
        let mut p = scalar_param(0.0);
        p.grad = Some(Tensor::scalar(1.0));
        adam_step([&mut p], 0.1, 0.5, 0.999, 1e-8).unwrap();
        assert!((p.value.item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = scalar_param(0.0);
        let opt = Adam {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        };
        for _ in 0..200 {
            let x = p.value.item();
            p.grad = Some(Tensor::scalar(2.0 * (x - 3.0)));
            opt.step([&mut p]).unwrap();
        }
        assert!((p.value.item() - 3.0).abs() < 1e-2, "{}", p.value.item());
    }

    #[test]
    fn missing_grad_is_a_state_error() {
        let mut p = scalar_param(1.0);
        assert!(matches!(
            Adam::default().step([&mut p]),
            Err(Error::State(_))
        ));
    }
}

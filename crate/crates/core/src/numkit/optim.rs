use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor together with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Adds a gradient produced by [`super::Graph::grad`]. `None` means no
    /// gradient reached the parameter.
    pub fn accumulate(&mut self, grad: Option<&Tensor<T>>) {
        if let Some(g) = grad {
            self.grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn blend_from(&mut self, online: &Param<T>, tau: T) {
        let keep = T::one() - tau;
        for (t, &o) in self.value.data_mut().iter_mut().zip(online.value.data()) {
            *t = tau * o + keep * *t;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64, l2: f64) -> Self {
        AdamConfig {
            lr,
            l2,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            l2: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. L2 regularisation is folded into the gradient
/// (`grad += l2 * value`) before the moment updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config }
    }

    /// Applies one update to every parameter and zeroes the gradients. If any
    /// gradient is non-finite nothing is modified.
    pub fn step<T: Scalar>(&self, params: &mut [&mut Param<T>]) -> Result<()> {
        for (idx, p) in params.iter().enumerate() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter #{idx} (shape {:?})",
                    p.shape()
                )));
            }
        }
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, l2, eps) = (T::of(c.lr), T::of(c.l2), T::of(c.eps));
        for p in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let Param {
                value,
                grad,
                adam_m,
                adam_v,
                ..
            } = &mut **p;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(adam_m.data_mut().iter_mut().zip(adam_v.data_mut().iter_mut()));
            for ((x, &g), (m, v)) in it {
                let g = g + l2 * *x;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

//! Layer-wise forward/backward training machinery.
//!
//! Covers the straight-through-estimator surrogate for the sign function
//! (piecewise-polynomial approximation and its derivative), clipped
//! straight-through gradients for latent weights, batch normalization,
//! softmax cross-entropy, and Adam with linear learning-rate decay.

mod batchnorm;
mod convgrad;
mod loss;

pub use batchnorm::BatchNorm2d;
pub use convgrad::{conv2d_backward, conv2d_forward, conv2d_input_grad, conv2d_weight_grad};
pub use loss::softmax_cross_entropy;

use crate::num::Scalar;
use crate::tensor::{sign_binarize, BitTensor, Tensor4};

/// What a forward pass is for. Training saves tensors for backward;
/// calibration refreshes batch-norm statistics; eval touches nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Forward for a training step. With `smooth` set, activations pass
    /// through the differentiable surrogate instead of hard sign — used by
    /// gradient checks, never by real training.
    Train { smooth: bool },
    /// Forward that recomputes batch-norm running statistics.
    Calibrate,
    /// Inference with frozen statistics.
    Eval,
}

impl Phase {
    pub fn is_train(self) -> bool {
        matches!(self, Phase::Train { .. })
    }

    pub fn smooth(self) -> bool {
        matches!(self, Phase::Train { smooth: true })
    }
}

/// A trainable tensor: latent value, accumulated gradient, and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub adam: AdamState<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor4<T>) -> Self {
        let len = value.len();
        let grad = Tensor4::zeros(value.shape());
        Parameter {
            value,
            grad,
            adam: AdamState {
                m: vec![T::zero(); len],
                v: vec![T::zero(); len],
                t: 0,
            },
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Optimizer and batching hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Step count over which the learning rate decays linearly to zero.
    pub total_steps: u64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            total_steps: 1,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(crate::Error::config("learning_rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(crate::Error::config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(crate::Error::config("batch_size and total_steps must be positive"));
        }
        Ok(())
    }

    /// Linearly decayed learning rate at a 0-based step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        self.learning_rate * frac.max(0.0)
    }
}

/// The differentiable sign surrogate: −1 below −1, `2x+x²` on `[−1,0)`,
/// `2x−x²` on `[0,1)`, 1 from 1 on.
#[inline]
pub fn surrogate<T: Scalar>(x: T) -> T {
    let one = T::one();
    let two = T::cast(2.0);
    if x < -one {
        -one
    } else if x < T::zero() {
        two * x + x * x
    } else if x < one {
        two * x - x * x
    } else {
        one
    }
}

/// Derivative of [`surrogate`]: `2+2x` on `[−1,0)`, `2−2x` on `[0,1)`,
/// 0 elsewhere.
#[inline]
pub fn surrogate_grad<T: Scalar>(x: T) -> T {
    let one = T::one();
    let two = T::cast(2.0);
    if x < -one {
        T::zero()
    } else if x < T::zero() {
        two + two * x
    } else if x < one {
        two - two * x
    } else {
        T::zero()
    }
}

/// Binarizes an activation tensor and keeps the pre-sign values for the
/// backward pass.
pub fn ste_activation_forward<T: Scalar>(x: &Tensor4<T>) -> (BitTensor, Tensor4<T>) {
    (sign_binarize(x), x.clone())
}

/// Surrogate gradient through the sign: `grad_out · dA/dx(saved)`.
pub fn ste_activation_backward<T: Scalar>(grad_out: &Tensor4<T>, saved: &Tensor4<T>) -> Tensor4<T> {
    let mut out = grad_out.clone();
    ste_activation_backward_inplace(&mut out, saved);
    out
}

/// In-place variant: `grad ← grad · dA/dx(saved)`.
pub fn ste_activation_backward_inplace<T: Scalar>(grad: &mut Tensor4<T>, saved: &Tensor4<T>) {
    assert_eq!(grad.shape(), saved.shape(), "shape mismatch");
    for (g, &x) in grad.data_mut().iter_mut().zip(saved.data()) {
        *g = *g * surrogate_grad(x);
    }
}

/// Clipped straight-through gradient for latent weights:
/// `grad · 1{|latent| ≤ 1}`.
pub fn binary_weight_backward<T: Scalar>(grad_out: &Tensor4<T>, latent: &Tensor4<T>) -> Tensor4<T> {
    assert_eq!(grad_out.shape(), latent.shape(), "shape mismatch");
    let one = T::one();
    let data = grad_out
        .data()
        .iter()
        .zip(latent.data())
        .map(|(&g, &w)| if w.abs() <= one { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(latent.shape(), data)
}

/// One Adam update with bias correction and linear learning-rate decay.
///
/// Moments decay everywhere; the value update is applied only where the
/// gradient is nonzero, so entries left out of the current block-diagonal
/// crop stay untouched that step.
pub fn adam_step<T: Scalar>(p: &mut Parameter<T>, cfg: &TrainConfig, step: u64) {
    p.adam.t += 1;
    let t = p.adam.t as i32;
    let lr = T::cast(cfg.lr_at(step));
    let b1 = T::cast(cfg.beta1);
    let b2 = T::cast(cfg.beta2);
    let eps = T::cast(cfg.epsilon);
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);

    let grad = p.grad.data();
    let value = p.value.data_mut();
    for i in 0..grad.len() {
        let g = grad[i];
        let m = b1 * p.adam.m[i] + (one - b1) * g;
        let v = b2 * p.adam.v[i] + (one - b2) * g * g;
        p.adam.m[i] = m;
        p.adam.v[i] = v;
        if g != T::zero() {
            let m_hat = m / c1;
            let v_hat = v / c2;
            value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

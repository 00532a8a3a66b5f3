//! Per-channel batch normalization with running statistics.

use crate::num::Scalar;
use crate::tensor::{Shape4, Tensor4};

use super::{Parameter, Phase};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Cache<T> {
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let param_shape = Shape4::new(1, channels, 1, 1);
        BatchNorm2d {
            gamma: Parameter::new(Tensor4::full(param_shape, T::one())),
            beta: Parameter::new(Tensor4::zeros(param_shape)),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn reset_running_stats(&mut self) {
        self.running_mean.fill(T::zero());
        self.running_var.fill(T::one());
    }

    pub fn forward(&mut self, x: &Tensor4<T>, phase: Phase) -> Tensor4<T> {
        let s = x.shape();
        assert_eq!(s.c, self.channels(), "channel count mismatch");
        match phase {
            Phase::Train { .. } | Phase::Calibrate => {
                assert!(s.n >= 2, "batch normalization needs batch size >= 2 in training");
                self.forward_batch_stats(x, phase)
            }
            Phase::Eval => self.forward_eval(x),
        }
    }

    fn forward_batch_stats(&mut self, x: &Tensor4<T>, phase: Phase) -> Tensor4<T> {
        let s = x.shape();
        let m = (s.n * s.h * s.w) as f64;
        let plane = s.h * s.w;
        let inv_m = T::cast(1.0 / m);
        let xd = x.data();

        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        for c in 0..s.c {
            let mut acc = T::zero();
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for &v in &xd[base..base + plane] {
                    acc += v;
                }
            }
            let mu = acc * inv_m;
            let mut sq = T::zero();
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for &v in &xd[base..base + plane] {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            mean[c] = mu;
            var[c] = sq * inv_m;
        }

        // Running statistics track the unbiased variance.
        let unbias = T::cast(m / (m - 1.0).max(1.0));
        match phase {
            Phase::Calibrate => {
                for c in 0..s.c {
                    self.running_mean[c] = mean[c];
                    self.running_var[c] = var[c] * unbias;
                }
            }
            _ => {
                let mom = T::cast(self.momentum);
                let keep = T::one() - mom;
                for c in 0..s.c {
                    self.running_mean[c] = keep * self.running_mean[c] + mom * mean[c];
                    self.running_var[c] = keep * self.running_var[c] + mom * var[c] * unbias;
                }
            }
        }

        let eps = T::cast(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();

        let mut x_hat = Tensor4::zeros(s);
        let mut y = Tensor4::zeros(s);
        {
            let xh = x_hat.data_mut();
            let yd = y.data_mut();
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let (mu, istd) = (mean[c], inv_std[c]);
                    let (g, b) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
                    for i in base..base + plane {
                        let h = (xd[i] - mu) * istd;
                        xh[i] = h;
                        yd[i] = g * h + b;
                    }
                }
            }
        }

        if phase.is_train() {
            self.cache = Some(Cache { x_hat, inv_std });
        }
        y
    }

    fn forward_eval(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let s = x.shape();
        let plane = s.h * s.w;
        let eps = T::cast(self.eps);
        let xd = x.data();
        let mut y = Tensor4::zeros(s);
        let yd = y.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let istd = (self.running_var[c] + eps).sqrt().recip();
                let mu = self.running_mean[c];
                let (g, b) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    yd[i] = g * (xd[i] - mu) * istd + b;
                }
            }
        }
        y
    }

    /// Backward through the most recent training forward. Accumulates
    /// gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Tensor4<T> {
        let cache = self.cache.take().expect("backward without training forward");
        let s = dy.shape();
        let plane = s.h * s.w;
        let m = T::cast((s.n * plane) as f64);
        let dyd = dy.data();
        let xh = cache.x_hat.data();

        let mut dx = Tensor4::zeros(s);
        let dxd = dx.data_mut();
        for c in 0..s.c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    sum_dy += dyd[i];
                    sum_dy_xhat += dyd[i] * xh[i];
                }
            }
            self.beta.grad.data_mut()[c] += sum_dy;
            self.gamma.grad.data_mut()[c] += sum_dy_xhat;

            let g = self.gamma.value.data()[c];
            let istd = cache.inv_std[c];
            let scale = g * istd / m;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    dxd[i] = scale * (m * dyd[i] - sum_dy - xh[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

//! Parameterised layers built on [`super::ops`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, BatchNormCache};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies (false for BN affine terms and biases).
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros_like(&value);
        Param {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    /// He-normal initialisation, std = sqrt(2 / fan_in).
    pub fn he_normal(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        Self::new(name, Tensor::new(shape.to_vec(), data).expect("shape"), true)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }
}

/// Training or inference behaviour for layers with batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Bias-free convolution.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    /// Square kernel with "same" padding for odd sizes.
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Conv2d {
            weight: Param::he_normal(format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[2], s[3])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.weight.value, self.stride, self.pad)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gw) = ops::conv2d_backward(x, &self.weight.value, self.stride, self.pad, grad_out)?;
        self.weight.grad.add_assign(&gw);
        Ok(gx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight]
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalisation parameters and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: T,
    /// Weight of the newest batch statistic in the running average.
    pub momentum: T,
    name: String,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormState {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::ONE), false),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            epsilon: T::from_f64(BN_EPSILON),
            momentum: T::from_f64(BN_MOMENTUM),
            name: name.to_string(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Training-mode forward; folds the batch statistics into the running
    /// averages.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (y, cache, mean, var) = ops::batch_norm_train(x, self.gamma.value.data(), self.beta.value.data(), self.epsilon)?;
        let mu = self.momentum;
        let keep = T::ONE - mu;
        for (m, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *m = keep * *m + mu * *b;
        }
        for (v, b) in self.running_var.data_mut().iter_mut().zip(&var) {
            *v = keep * *v + mu * *b;
        }
        Ok((y, cache))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::batch_norm_eval(
            x,
            self.gamma.value.data(),
            self.beta.value.data(),
            self.running_mean.data(),
            self.running_var.data(),
            self.epsilon,
        )
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (dx, dg, db) = ops::batch_norm_backward(cache, self.gamma.value.data(), grad_out)?;
        for (a, b) in self.gamma.grad.data_mut().iter_mut().zip(dg) {
            *a += b;
        }
        for (a, b) in self.beta.grad.data_mut().iter_mut().zip(db) {
            *a += b;
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), &self.running_mean),
            (format!("{}.running_var", self.name), &self.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::he_normal(format!("{name}.weight"), &[out_features, in_features], in_features, rng),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_features]), false),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (dx, dw, db) = ops::linear_backward(x, &self.weight.value, grad_out)?;
        self.weight.grad.add_assign(&dw);
        self.bias.grad.add_assign(&db);
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_ema() {
        let mut bn = BatchNormState::<f64>::new("bn", 1);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.125)).abs() < 1e-12);
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNormState::<f64>::new("bn", 1);
        bn.running_mean.data_mut()[0] = 2.0;
        bn.running_var.data_mut()[0] = 4.0 - 1e-5;
        let x = Tensor::new(vec![2, 1], vec![2.0, 6.0]).unwrap();
        let y = bn.forward_eval(&x).unwrap();
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn he_init_is_seeded() {
        let a = Conv2d::<f32>::new("c", 4, 8, 3, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Conv2d::<f32>::new("c", 4, 8, 3, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.weight.value, b.weight.value);
        let var = a.weight.value.sum_squares() / a.weight.value.len() as f64;
        assert!((var - 2.0 / 36.0).abs() < 0.02, "{var}");
    }
}

//! DenseNet-BC building blocks: bottleneck layers, dense blocks and
//! channel-preserving transitions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{self, BatchNormCache};
use crate::nn::{BatchNormState, Conv2d, Param};
use crate::tensor::{Real, Tensor};

/// Width of the 1x1 bottleneck stage as a multiple of the growth rate.
pub const BOTTLENECK_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayerSpec {
    pub in_channels: usize,
    pub growth: usize,
    pub bottleneck_width: usize,
}

impl DenseLayerSpec {
    pub fn new(in_channels: usize, growth: usize) -> Self {
        DenseLayerSpec {
            in_channels,
            growth,
            bottleneck_width: BOTTLENECK_FACTOR * growth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockSpec {
    pub num_layers: usize,
    pub growth: usize,
    pub in_channels: usize,
}

impl DenseBlockSpec {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.growth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionSpec {
    pub channels: usize,
}

fn check_in_channels<T: Real>(op: &'static str, x: &Tensor<T>, expected: usize) -> Result<()> {
    let (_, c, _, _) = x.dims4(op)?;
    if c != expected {
        return Err(Error::dim(op, "channels", format!("expected {expected} input channels, got {c}")));
    }
    Ok(())
}

/// BN -> ReLU -> conv1x1(4k) -> BN -> ReLU -> conv3x3(k).
#[derive(Debug, Clone)]
pub struct DenseLayer<T> {
    pub spec: DenseLayerSpec,
    pub norm1: BatchNormState<T>,
    pub conv1: Conv2d<T>,
    pub norm2: BatchNormState<T>,
    pub conv2: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct DenseLayerCache<T> {
    bn1: BatchNormCache<T>,
    act1: Tensor<T>,
    bn2: BatchNormCache<T>,
    act2: Tensor<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new(name: &str, spec: DenseLayerSpec, rng: &mut impl Rng) -> Self {
        DenseLayer {
            spec,
            norm1: BatchNormState::new(&format!("{name}.norm1"), spec.in_channels),
            conv1: Conv2d::new(&format!("{name}.conv1"), spec.in_channels, spec.bottleneck_width, 1, rng),
            norm2: BatchNormState::new(&format!("{name}.norm2"), spec.bottleneck_width),
            conv2: Conv2d::new(&format!("{name}.conv2"), spec.bottleneck_width, spec.growth, 3, rng),
        }
    }

    /// Returns only the `k` new feature maps.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_in_channels("dense_layer", x, self.spec.in_channels)?;
        let a1 = ops::relu(&self.norm1.forward_eval(x)?);
        let z1 = self.conv1.forward(&a1)?;
        let a2 = ops::relu(&self.norm2.forward_eval(&z1)?);
        self.conv2.forward(&a2)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseLayerCache<T>)> {
        check_in_channels("dense_layer", x, self.spec.in_channels)?;
        let (n1, bn1) = self.norm1.forward_train(x)?;
        let act1 = ops::relu(&n1);
        let z1 = self.conv1.forward(&act1)?;
        let (n2, bn2) = self.norm2.forward_train(&z1)?;
        let act2 = ops::relu(&n2);
        let y = self.conv2.forward(&act2)?;
        Ok((y, DenseLayerCache { bn1, act1, bn2, act2 }))
    }

    pub fn backward(&mut self, cache: &DenseLayerCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.conv2.backward(&cache.act2, grad_out)?;
        let g = ops::relu_backward(&cache.act2, &g);
        let g = self.norm2.backward(&cache.bn2, &g)?;
        let g = self.conv1.backward(&cache.act1, &g)?;
        let g = ops::relu_backward(&cache.act1, &g);
        self.norm1.backward(&cache.bn1, &g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.norm1.params();
        v.extend(self.conv1.params());
        v.extend(self.norm2.params());
        v.extend(self.conv2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.norm1.params_mut();
        v.extend(self.conv1.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.conv2.params_mut());
        v
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormState<T>> {
        vec![&self.norm1, &self.norm2]
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        vec![&mut self.norm1, &mut self.norm2]
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock<T> {
    pub spec: DenseBlockSpec,
    pub layers: Vec<DenseLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct DenseBlockCache<T> {
    layers: Vec<DenseLayerCache<T>>,
}

impl<T: Real> DenseBlock<T> {
    pub fn new(name: &str, spec: DenseBlockSpec, rng: &mut impl Rng) -> Self {
        let layers = (0..spec.num_layers)
            .map(|i| {
                let layer_spec = DenseLayerSpec::new(spec.in_channels + i * spec.growth, spec.growth);
                DenseLayer::new(&format!("{name}.layer{i}"), layer_spec, rng)
            })
            .collect();
        DenseBlock { spec, layers }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_traced(x, &mut |_, _| {}).map(|(y, _)| y)
    }

    /// Evaluation-mode forward that lets `hook` modify each layer's new
    /// feature maps before they are concatenated, and returns every
    /// layer's input alongside the block output.
    pub fn forward_traced(
        &self,
        x: &Tensor<T>,
        hook: &mut dyn FnMut(usize, &mut Tensor<T>),
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        check_in_channels("dense_block", x, self.spec.in_channels)?;
        let mut features = x.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward_eval(&features)?;
            hook(i, &mut y);
            let next = ops::concat_channels(&[&features, &y])?;
            inputs.push(std::mem::replace(&mut features, next));
        }
        Ok((features, inputs))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseBlockCache<T>)> {
        check_in_channels("dense_block", x, self.spec.in_channels)?;
        let mut features = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, cache) = layer.forward_train(&features)?;
            features = ops::concat_channels(&[&features, &y])?;
            caches.push(cache);
        }
        Ok((features, DenseBlockCache { layers: caches }))
    }

    pub fn backward(&mut self, cache: &DenseBlockCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.spec.growth;
        let mut grad = grad_out.clone();
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            let c_in = layer.spec.in_channels;
            let mut parts = ops::split_channels(&grad, &[c_in, k])?;
            let grad_new = parts.pop().expect("two parts");
            let mut grad_prev = parts.pop().expect("two parts");
            grad_prev.add_assign(&layer.backward(lc, &grad_new)?);
            grad = grad_prev;
        }
        Ok(grad)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(DenseLayer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(DenseLayer::params_mut).collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormState<T>> {
        self.layers.iter().flat_map(DenseLayer::batch_norms).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        self.layers.iter_mut().flat_map(DenseLayer::batch_norms_mut).collect()
    }
}

/// BN -> ReLU -> conv1x1(C -> C) -> 2x2 average pool.
#[derive(Debug, Clone)]
pub struct Transition<T> {
    pub spec: TransitionSpec,
    pub norm: BatchNormState<T>,
    pub conv: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct TransitionCache<T> {
    bn: BatchNormCache<T>,
    act: Tensor<T>,
}

impl<T: Real> Transition<T> {
    pub fn new(name: &str, spec: TransitionSpec, rng: &mut impl Rng) -> Self {
        Transition {
            spec,
            norm: BatchNormState::new(&format!("{name}.norm"), spec.channels),
            conv: Conv2d::new(&format!("{name}.conv"), spec.channels, spec.channels, 1, rng),
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_in_channels("transition", x, self.spec.channels)?;
        let a = ops::relu(&self.norm.forward_eval(x)?);
        ops::avg_pool2(&self.conv.forward(&a)?)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, TransitionCache<T>)> {
        check_in_channels("transition", x, self.spec.channels)?;
        let (_, _, h, w) = x.dims4("transition")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("transition", "spatial", format!("{h}x{w} is not evenly poolable")));
        }
        let (nx, bn) = self.norm.forward_train(x)?;
        let act = ops::relu(&nx);
        let y = ops::avg_pool2(&self.conv.forward(&act)?)?;
        Ok((y, TransitionCache { bn, act }))
    }

    pub fn backward(&mut self, cache: &TransitionCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = ops::avg_pool2_backward(grad_out)?;
        let g = self.conv.backward(&cache.act, &g)?;
        let g = ops::relu_backward(&cache.act, &g);
        self.norm.backward(&cache.bn, &g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.norm.params();
        v.extend(self.conv.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.norm.params_mut();
        v.extend(self.conv.params_mut());
        v
    }
}

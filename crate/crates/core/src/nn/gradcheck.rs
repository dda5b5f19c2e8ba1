//! Central-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::Param;
use crate::tensor::Tensor;

/// Above this many coordinates a fixed-seed random subset of this size is checked.
pub const MAX_CHECKED_COORDS: usize = 10_000;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

const SUBSET_SEED: u64 = 0x5eed_9c4e;

/// A scalar function of a flat coordinate vector with an analytic gradient.
pub trait GradCheckable {
    fn num_coords(&self) -> usize;
    fn coord(&self, index: usize) -> f64;
    fn set_coord(&mut self, index: usize, value: f64);
    fn loss(&mut self) -> f64;
    /// Analytic gradient of [`GradCheckable::loss`] in coordinate order.
    fn gradient(&mut self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn finite_diff_check(op: &mut dyn GradCheckable, eps: f64) -> GradCheckReport {
    let analytic = op.gradient();
    let total = op.num_coords();
    assert_eq!(analytic.len(), total, "gradient length must match coordinate count");
    let indices: Vec<usize> = if total > MAX_CHECKED_COORDS {
        let mut rng = ChaCha8Rng::seed_from_u64(SUBSET_SEED);
        let mut v = sample(&mut rng, total, MAX_CHECKED_COORDS).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..total).collect()
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    for &i in &indices {
        let x = op.coord(i);
        op.set_coord(i, x + eps);
        let up = op.loss();
        op.set_coord(i, x - eps);
        let down = op.loss();
        op.set_coord(i, x);
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error || err.is_nan() {
            report = GradCheckReport {
                max_relative_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
                checked: indices.len(),
            };
        }
    }
    report
}

/// Fixed random weights that reduce a tensor output to a scalar, so every
/// output coordinate contributes a distinct upstream gradient.
#[derive(Debug, Clone)]
pub struct Projection {
    weights: Vec<f64>,
}

impl Projection {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Projection {
            weights: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    pub fn apply(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.len(), self.weights.len(), "projection length");
        t.data().iter().zip(&self.weights).map(|(a, b)| a * b).sum()
    }

    pub fn grad(&self, shape: &[usize]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), self.weights.clone()).expect("projection shape")
    }
}

type Forward = dyn Fn(&[Tensor<f64>]) -> Tensor<f64>;
type Backward = dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>;

/// Gradient check harness for a pure function of several tensors.
pub struct TensorFnCheck {
    pub inputs: Vec<Tensor<f64>>,
    forward: Box<Forward>,
    backward: Box<Backward>,
    projection: Projection,
}

impl TensorFnCheck {
    pub fn new(
        inputs: Vec<Tensor<f64>>,
        seed: u64,
        forward: impl Fn(&[Tensor<f64>]) -> Tensor<f64> + 'static,
        backward: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>> + 'static,
    ) -> Self {
        let out_len = forward(&inputs).len();
        TensorFnCheck {
            inputs,
            forward: Box::new(forward),
            backward: Box::new(backward),
            projection: Projection::new(out_len, seed),
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (t, tensor) in self.inputs.iter().enumerate() {
            if index < tensor.len() {
                return (t, index);
            }
            index -= tensor.len();
        }
        panic!("coordinate out of range");
    }
}

impl GradCheckable for TensorFnCheck {
    fn num_coords(&self) -> usize {
        self.inputs.iter().map(Tensor::len).sum()
    }

    fn coord(&self, index: usize) -> f64 {
        let (t, i) = self.locate(index);
        self.inputs[t].data()[i]
    }

    fn set_coord(&mut self, index: usize, value: f64) {
        let (t, i) = self.locate(index);
        self.inputs[t].data_mut()[i] = value;
    }

    fn loss(&mut self) -> f64 {
        self.projection.apply(&(self.forward)(&self.inputs))
    }

    fn gradient(&mut self) -> Vec<f64> {
        let out = (self.forward)(&self.inputs);
        let grads = (self.backward)(&self.inputs, &self.projection.grad(out.shape()));
        assert_eq!(grads.len(), self.inputs.len(), "one gradient per input");
        grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}

type ModuleLoss<M> = dyn Fn(&mut M, &Tensor<f64>) -> f64;
type ModuleGrad<M> = dyn Fn(&mut M, &Tensor<f64>) -> Tensor<f64>;

/// Gradient check harness for a stateful module. Coordinates are the
/// input tensor followed by every parameter in `params` order.
///
/// `loss` evaluates the scalar objective; `grad` runs forward and backward
/// from scratch, accumulates parameter gradients and returns the input
/// gradient. Parameter gradients are zeroed before each `grad` call.
pub struct ModuleCheck<M: 'static> {
    pub module: M,
    pub input: Tensor<f64>,
    loss: Box<ModuleLoss<M>>,
    grad: Box<ModuleGrad<M>>,
    params: fn(&M) -> Vec<&Param<f64>>,
    params_mut: fn(&mut M) -> Vec<&mut Param<f64>>,
}

impl<M: 'static> ModuleCheck<M> {
    pub fn new(
        module: M,
        input: Tensor<f64>,
        loss: impl Fn(&mut M, &Tensor<f64>) -> f64 + 'static,
        grad: impl Fn(&mut M, &Tensor<f64>) -> Tensor<f64> + 'static,
        params: fn(&M) -> Vec<&Param<f64>>,
        params_mut: fn(&mut M) -> Vec<&mut Param<f64>>,
    ) -> Self {
        ModuleCheck {
            module,
            input,
            loss: Box::new(loss),
            grad: Box::new(grad),
            params,
            params_mut,
        }
    }

    /// Reduces a module output through a fixed random projection.
    pub fn projected(
        module: M,
        input: Tensor<f64>,
        seed: u64,
        forward: fn(&mut M, &Tensor<f64>) -> Tensor<f64>,
        backward: fn(&mut M, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
        params: fn(&M) -> Vec<&Param<f64>>,
        params_mut: fn(&mut M) -> Vec<&mut Param<f64>>,
    ) -> Self {
        let mut module = module;
        let out = forward(&mut module, &input);
        let projection = Projection::new(out.len(), seed);
        let p2 = projection.clone();
        Self::new(
            module,
            input,
            move |m, x| projection.apply(&forward(m, x)),
            move |m, x| {
                let shape = forward(m, x).shape().to_vec();
                backward(m, x, &p2.grad(&shape))
            },
            params,
            params_mut,
        )
    }

    fn locate(&self, mut index: usize) -> (Option<usize>, usize) {
        if index < self.input.len() {
            return (None, index);
        }
        index -= self.input.len();
        for (p, param) in (self.params)(&self.module).into_iter().enumerate() {
            if index < param.value.len() {
                return (Some(p), index);
            }
            index -= param.value.len();
        }
        panic!("coordinate out of range");
    }
}

impl<M: 'static> GradCheckable for ModuleCheck<M> {
    fn num_coords(&self) -> usize {
        self.input.len() + (self.params)(&self.module).iter().map(|p| p.value.len()).sum::<usize>()
    }

    fn coord(&self, index: usize) -> f64 {
        match self.locate(index) {
            (None, i) => self.input.data()[i],
            (Some(p), i) => (self.params)(&self.module)[p].value.data()[i],
        }
    }

    fn set_coord(&mut self, index: usize, value: f64) {
        match self.locate(index) {
            (None, i) => self.input.data_mut()[i] = value,
            (Some(p), i) => (self.params_mut)(&mut self.module)[p].value.data_mut()[i] = value,
        }
    }

    fn loss(&mut self) -> f64 {
        (self.loss)(&mut self.module, &self.input)
    }

    fn gradient(&mut self) -> Vec<f64> {
        for p in (self.params_mut)(&mut self.module) {
            p.zero_grad();
        }
        let gx = (self.grad)(&mut self.module, &self.input);
        let mut out: Vec<f64> = gx.data().to_vec();
        for p in (self.params)(&self.module) {
            out.extend(p.grad.data().iter().copied());
        }
        out
    }
}

//! Trainable parameters: a value tensor paired with a gradient buffer, a
//! momentum buffer, a freeze flag, and a hierarchical name used for
//! checkpointing and weight-decay dispatch.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug)]
pub struct ParamInner {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    pub frozen: bool,
    /// Whether weight decay applies. Bias vectors and normalization
    /// gains/biases opt out.
    pub decay: bool,
}

/// Shared handle to one parameter. The graph holds clones of the handle so
/// backward passes can accumulate gradients without threading mutable
/// borrows through the forward builders.
#[derive(Debug, Clone)]
pub struct Param(Rc<RefCell<ParamInner>>);

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Self {
        let shape = value.shape().to_vec();
        Param(Rc::new(RefCell::new(ParamInner {
            name: name.into(),
            grad: Tensor::zeros(shape.clone()),
            momentum: Tensor::zeros(shape),
            value,
            frozen: false,
            decay,
        })))
    }

    /// Gaussian-initialized weight matrix/vector.
    pub fn normal(
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
        decay: bool,
    ) -> Self {
        let dist = Normal::new(0.0, std).expect("valid normal");
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
        Param::new(name, Tensor::new(shape, data).expect("finite init"), decay)
    }

    /// Glorot-initialized `[fan_in, fan_out]` matrix: keeps activations at
    /// unit scale regardless of width, which the desk-scale dims need.
    pub fn glorot(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Param::normal(name, vec![fan_in, fan_out], std, rng, true)
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Param::new(name, Tensor::zeros(shape), false)
    }

    pub fn ones(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Param::new(name, Tensor::filled(shape, 1.0), false)
    }

    /// Uniform init in `[-bound, bound]`; used where a spread init keeps
    /// every coordinate away from zero-gradient saddle points.
    pub fn uniform(
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut ChaCha8Rng,
        decay: bool,
    ) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        Param::new(name, Tensor::new(shape, data).expect("finite init"), decay)
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().value.numel()
    }

    pub fn frozen(&self) -> bool {
        self.0.borrow().frozen
    }

    pub fn freeze(&self) {
        self.0.borrow_mut().frozen = true;
    }

    pub fn decay(&self) -> bool {
        self.0.borrow().decay
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.0.borrow(), |p| &p.value)
    }

    pub fn value_clone(&self) -> Tensor {
        self.0.borrow().value.clone()
    }

    pub fn set_value(&self, t: Tensor) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.value.shape(), t.shape(), "param shape is fixed");
        inner.value = t;
    }

    pub fn grad_clone(&self) -> Tensor {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad.fill(0.0);
    }

    pub fn add_grad(&self, g: &Tensor, scale: f64) {
        self.0.borrow_mut().grad.add_scaled(g, scale);
    }

    /// Nudges one coordinate of the value in place (finite differencing).
    pub fn perturb(&self, index: usize, delta: f64) {
        let mut inner = self.0.borrow_mut();
        inner.value.data_mut()[index] += delta;
    }

    pub fn coordinate(&self, index: usize) -> f64 {
        self.0.borrow().value.data()[index]
    }

    pub fn set_coordinate(&self, index: usize, v: f64) {
        self.0.borrow_mut().value.data_mut()[index] = v;
    }

    pub fn checksum(&self) -> u64 {
        self.0.borrow().value.bit_checksum()
    }

    pub(crate) fn with_inner_mut<R>(&self, f: impl FnOnce(&mut ParamInner) -> R) -> R {
        f(&mut self.0.borrow_mut())
    }
}

/// Order-sensitive checksum over a parameter list; sensitive to every bit
/// of every value.
pub fn params_checksum(params: &[Param]) -> u64 {
    crate::tensor::combine_checksums(params.iter().map(|p| p.checksum()))
}

pub fn total_numel(params: &[Param]) -> usize {
    params.iter().map(|p| p.numel()).sum()
}

pub fn freeze_all(params: &[Param]) {
    for p in params {
        p.freeze();
    }
}

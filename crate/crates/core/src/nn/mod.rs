//! Minimal layer kit with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, and
//! accumulates parameter gradients into [`Param::grad`]. Callers zero the
//! gradients between optimizer steps.

mod act;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use act::{elu, elu_backward, sigmoid, Elu};
pub use conv::Conv2d;
pub use linear::Linear;
pub use loss::{cross_entropy, cross_entropy_backward, softmax_rows, softmax_backward, PROB_FLOOR};
pub use norm::BatchNorm;
pub use pool::GlobalMaxPool;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Training mode uses batch statistics in normalization layers and updates
/// their running estimates; evaluation mode uses the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            value: ArrayD::from_elem(IxDyn(shape), v),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// He-normal initialization with the given fan-in.
    pub fn he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Self {
            grad: ArrayD::zeros(value.raw_dim()),
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// A named tensor exposed to optimizers and checkpoints.
pub enum Slot<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut ArrayD<f64>),
}

pub trait Module {
    /// Visits every parameter and buffer under `prefix` in a fixed order.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

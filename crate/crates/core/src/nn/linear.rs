use ndarray::{Array2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Module, Param, Slot};

/// Fully connected layer, `y = x Wᵀ + b` on `(batch, features)` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::he(&[outputs, inputs], inputs, rng),
            bias: Param::zeros(&[outputs]),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w().t());
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        y += &b;
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.input.as_ref().expect("Linear::backward before forward");
        let dw = dy.t().dot(x);
        let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d weight");
        gw += &dw;
        let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d bias");
        gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w())
    }
}

impl Module for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

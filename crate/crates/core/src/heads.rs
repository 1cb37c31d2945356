//! Per-stage and concatenation classifiers.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, softmax_backward, softmax_rows, BatchNorm, Elu, Linear, Mode, Module, Slot};

/// `Linear → BatchNorm → ELU → Linear → softmax`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc1: Linear,
    pub bn: BatchNorm,
    act: Elu,
    pub fc2: Linear,
    probs: Option<Array2<f64>>,
}

impl Classifier {
    /// Hidden width is half the input width (at least one unit).
    pub fn new<R: Rng + ?Sized>(inputs: usize, classes: usize, rng: &mut R) -> Self {
        let hidden = (inputs / 2).max(1);
        Self {
            fc1: Linear::new(inputs, hidden, rng),
            bn: BatchNorm::new(hidden),
            act: Elu::default(),
            fc2: Linear::new(hidden, classes, rng),
            probs: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.fc1.inputs()
    }

    pub fn classes(&self) -> usize {
        self.fc2.outputs()
    }

    pub fn logits(&mut self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        if x.dim().1 != self.inputs() {
            return Err(Error::LengthMismatch {
                expected: self.inputs(),
                actual: x.dim().1,
            });
        }
        let h = self.fc1.forward(x);
        let h = self.bn.forward2(&h, mode);
        let h = self.act.forward(&h);
        Ok(self.fc2.forward(&h))
    }

    /// Class probabilities, one row per sample.
    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        let p = softmax_rows(&self.logits(x, mode)?);
        self.probs = Some(p.clone());
        Ok(p)
    }

    pub fn backward_logits(&mut self, dlogits: &Array2<f64>) -> Array2<f64> {
        let d = self.fc2.backward(dlogits);
        let d = self.act.backward(&d);
        let d = self.bn.backward2(&d);
        self.fc1.backward(&d)
    }

    /// Backward from a gradient on the probabilities of the last `forward`.
    pub fn backward(&mut self, dprobs: &Array2<f64>) -> Array2<f64> {
        let p = self.probs.as_ref().expect("Classifier::backward before forward");
        let dz = softmax_backward(p, dprobs);
        self.backward_logits(&dz)
    }
}

impl Module for Classifier {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Class distributions for one sample: every interacting stage plus the
/// concatenation head.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    pub y_hat: BTreeMap<usize, Vec<f64>>,
    pub y_hat_concat: Vec<f64>,
    pub m_concat: Vec<f64>,
}

impl PredictionBundle {
    pub fn classes(&self) -> usize {
        self.y_hat_concat.len()
    }

    /// Every vector non-negative and summing to one within `tol`.
    pub fn is_on_simplex(&self, tol: f64) -> bool {
        let ok = |p: &Vec<f64>| p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= tol;
        ok(&self.y_hat_concat) && self.y_hat.values().all(ok)
    }
}

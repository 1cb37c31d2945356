//! SGD with momentum and per-group learning rates, plus cosine annealing.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{ArrayD, Zip};

use crate::model::{Model, ParamGroup};
use crate::nn::Slot;

/// `lr(t) = lr0 · (1 + cos(π t / T)) / 2`, annealing to 0 at `t = T`.
pub fn cosine_lr(initial: f64, step: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return initial;
    }
    let t = step.min(horizon) as f64 / horizon as f64;
    initial * (1.0 + (PI * t).cos()) / 2.0
}

/// Learning rates for the two parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub pretrained: f64,
    pub new: f64,
}

impl GroupRates {
    pub fn for_group(&self, group: ParamGroup) -> f64 {
        if group.is_backbone() {
            self.pretrained
        } else {
            self.new
        }
    }

    pub fn cosine(&self, step: usize, horizon: usize) -> Self {
        Self {
            pretrained: cosine_lr(self.pretrained, step, horizon),
            new: cosine_lr(self.new, step, horizon),
        }
    }
}

/// Momentum SGD with coupled L2 weight decay:
/// `g ← ∇ + λ p`, `v ← μ v + g` (first step `v ← g`), `p ← p − lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Momentum buffers keyed by parameter path.
    pub buffers: BTreeMap<String, ArrayD<f64>>,
    /// Total number of `step` calls.
    pub steps: usize,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Updates every parameter whose group passes `active`, then zeroes all
    /// gradients. Returns the number of tensors updated.
    pub fn step(&mut self, model: &mut Model, rates: GroupRates, active: &dyn Fn(ParamGroup) -> bool) -> usize {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let buffers = &mut self.buffers;
        let mut updated = 0;
        model.visit_grouped(&mut |group, name, slot| {
            let Slot::Param(p) = slot else { return };
            if active(group) {
                let lr = rates.for_group(group);
                let mut g = p.grad.clone();
                if wd != 0.0 {
                    g.zip_mut_with(&p.value, |g, &v| *g += wd * v);
                }
                match buffers.get_mut(name) {
                    Some(buf) => Zip::from(buf).and(&g).for_each(|b, &g| *b = mu * *b + g),
                    None => {
                        buffers.insert(name.to_string(), g);
                    }
                }
                Zip::from(&mut p.value).and(&buffers[name]).for_each(|v, &b| *v -= lr * b);
                updated += 1;
            }
            p.zero_grad();
        });
        self.steps += 1;
        updated
    }
}

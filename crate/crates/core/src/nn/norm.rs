use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, IxDyn};

use super::{join, Mode, Module, Param, Slot};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over every axis except the channel axis (axis 1).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let m = (b * h * w) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let ch = x.index_axis(Axis(1), ci);
                    let mu = ch.sum() / m;
                    let v = ch.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ci in 0..c {
                    self.running_mean[ci] = (1.0 - BN_MOMENTUM) * self.running_mean[ci] + BN_MOMENTUM * mean[ci];
                    self.running_var[ci] =
                        (1.0 - BN_MOMENTUM) * self.running_var[ci] + BN_MOMENTUM * var[ci] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.view().into_dimensionality::<Ix1>().unwrap().to_owned(),
                self.running_var.view().into_dimensionality::<Ix1>().unwrap().to_owned(),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = x.to_owned();
        let mut y = Array4::<f64>::zeros((b, c, h, w));
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (g, be) = (self.gamma.value[ci], self.beta.value[ci]);
            let mut xh = xhat.index_axis_mut(Axis(1), ci);
            xh.mapv_inplace(|v| (v - mu) * is);
            y.index_axis_mut(Axis(1), ci).zip_mut_with(&xh, |yv, &xv| *yv = g * xv + be);
        }
        self.cache = Some(Cache { xhat, inv_std, mode });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.as_ref().expect("BatchNorm::backward before forward");
        let (b, c, h, w) = dy.dim();
        let m = (b * h * w) as f64;
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = dyc.sum();
            let sum_dy_xh = ndarray::Zip::from(&dyc).and(&xh).fold(0.0, |acc, &d, &x| acc + d * x);
            self.gamma.grad[ci] += sum_dy_xh;
            self.beta.grad[ci] += sum_dy;
            let g = self.gamma.value[ci];
            let is = cache.inv_std[ci];
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            match cache.mode {
                Mode::Train => {
                    let k = g * is / m;
                    ndarray::Zip::from(&mut dxc)
                        .and(&dyc)
                        .and(&xh)
                        .for_each(|o, &d, &x| *o = k * (m * d - sum_dy - x * sum_dy_xh));
                }
                Mode::Eval => {
                    ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| *o = g * is * d);
                }
            }
        }
        dx
    }

    pub fn forward2(&mut self, x: &Array2<f64>, mode: Mode) -> Array2<f64> {
        let (b, f) = x.dim();
        let x4 = x.as_standard_layout().into_owned().into_shape_with_order((b, f, 1, 1)).expect("contiguous");
        self.forward(&x4, mode).into_shape_with_order((b, f)).expect("contiguous")
    }

    pub fn backward2(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let (b, f) = dy.dim();
        let d4 = dy.as_standard_layout().into_owned().into_shape_with_order((b, f, 1, 1)).expect("contiguous");
        self.backward(&d4).into_shape_with_order((b, f)).expect("contiguous")
    }
}

impl Module for BatchNorm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

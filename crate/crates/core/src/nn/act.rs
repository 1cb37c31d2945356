use ndarray::{ArrayD, Dimension, Array, Zip};

/// ELU with α = 1.
#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of ELU expressed through its output.
#[inline]
pub fn elu_backward(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        y + 1.0
    }
}

/// Logistic function, stable for large |z|.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Elu {
    output: Option<ArrayD<f64>>,
}

impl Elu {
    pub fn forward<D: Dimension>(&mut self, x: &Array<f64, D>) -> Array<f64, D> {
        let y = x.mapv(elu);
        self.output = Some(y.clone().into_dyn());
        y
    }

    pub fn backward<D: Dimension>(&self, dy: &Array<f64, D>) -> Array<f64, D> {
        let y = self.output.as_ref().expect("Elu::backward before forward");
        let mut dx = dy.clone();
        Zip::from(&mut dx)
            .and(y.view().into_dimensionality::<D>().expect("gradient shape"))
            .for_each(|d, &y| *d *= elu_backward(y));
        dx
    }
}

use ndarray::{Array2, Array4};

/// Global max pooling `(B, C, H, W) -> (B, C)`. Ties resolve to the first
/// location in row-major order.
type Argmax = (Vec<usize>, (usize, usize, usize, usize));

#[derive(Debug, Clone, Default)]
pub struct GlobalMaxPool {
    argmax: Option<Argmax>,
}

impl GlobalMaxPool {
    pub fn forward(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let (b, c, h, w) = x.dim();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let plane = h * w;
        let mut out = Array2::<f64>::zeros((b, c));
        let mut argmax = Vec::with_capacity(b * c);
        for (i, o) in out.iter_mut().enumerate() {
            let vals = &xs[i * plane..(i + 1) * plane];
            let mut best = 0;
            for (j, &v) in vals.iter().enumerate() {
                if v > vals[best] {
                    best = j;
                }
            }
            *o = vals[best];
            argmax.push(best);
        }
        self.argmax = Some((argmax, (b, c, h, w)));
        out
    }

    pub fn backward(&self, dy: &Array2<f64>) -> Array4<f64> {
        let (argmax, dims) = self.argmax.as_ref().expect("GlobalMaxPool::backward before forward");
        let plane = dims.2 * dims.3;
        let mut dx = Array4::<f64>::zeros(*dims);
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (i, (&j, &g)) in argmax.iter().zip(dy.iter()).enumerate() {
            dxs[i * plane + j] = g;
        }
        dx
    }

    /// Smallest gap between the maximum and the runner-up over every
    /// channel of `x`.
    pub fn min_tie_gap(x: &Array4<f64>) -> f64 {
        let (b, c, h, w) = x.dim();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let plane = h * w;
        let mut gap = f64::INFINITY;
        for i in 0..b * c {
            let vals = &xs[i * plane..(i + 1) * plane];
            let mut sorted = vals.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted.len() > 1 {
                gap = gap.min(sorted[0] - sorted[1]);
            }
        }
        gap
    }
}

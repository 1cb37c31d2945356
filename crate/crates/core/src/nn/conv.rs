use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use super::{join, Module, Param, Slot};

/// 2-D convolution lowered to a matrix product over an im2col buffer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::he(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous weight")
    }

    fn im2col(&self, x: &Array4<f64>, ho: usize, wo: usize) -> Array2<f64> {
        let (b, c, h, w) = x.dim();
        let (k, st, p) = (self.kernel, self.stride, self.padding);
        if k == 1 && st == 1 && p == 0 {
            // (B, C, H, W) -> (C, B*H*W)
            return x
                .view()
                .permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, b * h * w))
                .expect("contiguous");
        }
        let ncols = b * ho * wo;
        let mut cols = Array2::<f64>::zeros((c * k * k, ncols));
        let xs = x.as_slice().expect("standard layout input");
        let cs = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out_row = &mut cs[row * ncols..(row + 1) * ncols];
                    for bi in 0..b {
                        let plane = &xs[((bi * c + ci) * h) * w..((bi * c + ci) * h + h) * w];
                        for oy in 0..ho {
                            let iy = (oy * st + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..iy as usize * w + w];
                            let dst = &mut out_row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * st + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, dims: (usize, usize, usize, usize), ho: usize, wo: usize) -> Array4<f64> {
        let (b, c, h, w) = dims;
        let (k, st, p) = (self.kernel, self.stride, self.padding);
        if k == 1 && st == 1 && p == 0 {
            return dcols
                .view()
                .into_shape_with_order((c, b, h, w))
                .expect("contiguous")
                .permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .into_owned();
        }
        let ncols = b * ho * wo;
        let mut dx = Array4::<f64>::zeros(dims);
        let dxs = dx.as_slice_mut().expect("fresh array");
        let cs = dcols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let in_row = &cs[row * ncols..(row + 1) * ncols];
                    for bi in 0..b {
                        let base = (bi * c + ci) * h * w;
                        for oy in 0..ho {
                            let iy = (oy * st + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &in_row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                            let dst = &mut dxs[base + iy as usize * w..base + iy as usize * w + w];
                            for (ox, g) in src.iter().enumerate() {
                                let ix = (ox * st + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let cols = if x.is_standard_layout() {
            self.im2col(x, ho, wo)
        } else {
            self.im2col(&x.as_standard_layout().into_owned(), ho, wo)
        };
        let mut out = self.weight_matrix().dot(&cols);
        if let Some(bias) = &self.bias {
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(bias.value.iter()) {
                row += bv;
            }
        }
        let y = out
            .into_shape_with_order((self.out_channels, b, ho, wo))
            .expect("contiguous")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        self.cache = Some(Cache {
            cols,
            in_dims: (b, c, h, w),
            out_hw: (ho, wo),
        });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("Conv2d::backward before forward");
        let (b, _, _, _) = cache.in_dims;
        let (ho, wo) = cache.out_hw;
        let dy2 = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, b * ho * wo))
            .expect("contiguous");
        let dw = dy2.dot(&cache.cols.t());
        {
            let mut g = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("4-d weight");
            let mut g2 = g
                .view_mut()
                .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
                .expect("contiguous");
            g2 += &dw;
        }
        if let Some(bias) = &mut self.bias {
            let db = dy2.sum_axis(Axis(1));
            let mut g = bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
            g += &db;
        }
        let dcols = self.weight_matrix().t().dot(&dy2);
        let dx = self.col2im(&dcols, cache.in_dims, ho, wo);
        self.cache = Some(cache);
        dx
    }

    /// Reference convolution by direct nested loops, for tests.
    pub fn forward_naive(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let (k, st, p) = (self.kernel, self.stride, self.padding);
        let wt = self.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = Array4::<f64>::zeros((b, self.out_channels, ho, wo));
        for bi in 0..b {
            for co in 0..self.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = self.bias.as_ref().map_or(0.0, |bp| bp.value[[co]]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * st + ky) as isize - p as isize;
                                    let ix = (ox * st + kx) as isize - p as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += wt[[co, ci, ky, kx]] * x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }
}

impl Module for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dims, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, st, p) in &[(3, 2, 1), (3, 1, 1), (1, 1, 0), (2, 2, 0)] {
            let mut conv = Conv2d::new(3, 5, k, st, p, true, &mut rng);
            conv.bias.as_mut().unwrap().value.mapv_inplace(|_| 0.3);
            let x = random4(&mut rng, (2, 3, 7, 6));
            let fast = conv.forward(&x);
            let slow = conv.forward_naive(&x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, st, p) in &[(3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(2, 3, k, st, p, true, &mut rng);
            let x = random4(&mut rng, (2, 2, 5, 5));
            let y = conv.forward(&x);
            let dy = random4(&mut rng, y.dim());
            let dx = conv.backward(&dy);
            let loss = |conv: &Conv2d, x: &Array4<f64>| (conv.forward_naive(x) * &dy).sum();
            let h = 1e-6;
            for idx in [[0, 0, 0, 0], [1, 1, 2, 3], [0, 1, 4, 4]] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx[idx]).abs() < 1e-7, "dx {idx:?}: {fd} vs {}", dx[idx]);
            }
            let w0 = conv.weight.value.clone();
            let gw = conv.weight.grad.clone();
            for flat in [0usize, 5, w0.len() - 1] {
                let mut c2 = conv.clone();
                c2.weight.value.as_slice_mut().unwrap()[flat] += h;
                let up = loss(&c2, &x);
                c2.weight.value.as_slice_mut().unwrap()[flat] -= 2.0 * h;
                let down = loss(&c2, &x);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - gw.as_slice().unwrap()[flat]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn output_shape_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 8, 3, 2, 1, false, &mut rng);
        assert_eq!(conv.output_hw(64, 64), (32, 32));
        assert_eq!(conv.output_hw(2, 2), (1, 1));
    }
}

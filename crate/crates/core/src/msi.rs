//! Multi-stage interaction.
//!
//! Stage maps are reduced to `c`-vectors by a smooth conv block plus global
//! max pooling. An MLP over their concatenation yields a mutual vector
//! `x_m`; each stage vector is then gated, `g_n = σ(x_m ⊙ x_n)`, and
//! supplemented residually, `m_n = x_n + g_n ⊙ x_n`.

use ndarray::{concatenate, s, Array1, Array2, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, BatchNorm, Conv2d, Elu, GlobalMaxPool, Linear, Mode, Module, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionConfig {
    pub stage_num: usize,
    pub c: usize,
    pub mlp_hidden: usize,
}

impl InteractionConfig {
    pub fn new(stage_num: usize, c: usize) -> Self {
        Self {
            stage_num,
            c,
            mlp_hidden: c,
        }
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        if self.stage_num == 0 || self.stage_num > stages {
            return Err(Error::InvalidStageNum {
                stage_num: self.stage_num,
                stages,
            });
        }
        if self.c == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("interaction width c must be positive".into()));
        }
        Ok(())
    }
}

/// 1×1 conv `Cn → 2c` then 3×3 conv `2c → c`, each with batch norm and
/// ELU, followed by global max pooling.
#[derive(Debug, Clone)]
pub struct SmoothConvBlock {
    pub pointwise: Conv2d,
    pub bn1: BatchNorm,
    act1: Elu,
    pub spatial: Conv2d,
    pub bn2: BatchNorm,
    act2: Elu,
    pool: GlobalMaxPool,
    pre_pool: Option<Array4<f64>>,
}

impl SmoothConvBlock {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, c: usize, rng: &mut R) -> Self {
        Self {
            pointwise: Conv2d::new(in_channels, 2 * c, 1, 1, 0, false, rng),
            bn1: BatchNorm::new(2 * c),
            act1: Elu::default(),
            spatial: Conv2d::new(2 * c, c, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(c),
            act2: Elu::default(),
            pool: GlobalMaxPool::default(),
            pre_pool: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.pointwise.in_channels()
    }

    /// Conv block output before pooling.
    pub fn smooth(&mut self, map: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        if map.dim().1 != self.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels(),
                actual: map.dim().1,
            });
        }
        let y = self.pointwise.forward(map);
        let y = self.bn1.forward(&y, mode);
        let y = self.act1.forward(&y);
        let y = self.spatial.forward(&y);
        let y = self.bn2.forward(&y, mode);
        Ok(self.act2.forward(&y))
    }

    /// Smooth conv block then global max pooling: `(B, Cn, H, W) -> (B, c)`.
    pub fn forward(&mut self, map: &Array4<f64>, mode: Mode) -> Result<Array2<f64>> {
        let y = self.smooth(map, mode)?;
        let pooled = self.pool.forward(&y);
        self.pre_pool = Some(y);
        Ok(pooled)
    }

    /// Gap between the top two values of any pooled channel in the last
    /// forward; small values mean the pooling is near a non-smooth point.
    pub fn last_tie_gap(&self) -> f64 {
        self.pre_pool.as_ref().map_or(f64::INFINITY, GlobalMaxPool::min_tie_gap)
    }

    pub fn backward(&mut self, dx: &Array2<f64>) -> Array4<f64> {
        let d = self.pool.backward(dx);
        let d = self.act2.backward(&d);
        let d = self.bn2.backward(&d);
        let d = self.spatial.backward(&d);
        let d = self.act1.backward(&d);
        let d = self.bn1.backward(&d);
        self.pointwise.backward(&d)
    }
}

impl Module for SmoothConvBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.pointwise.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.spatial.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }
}

/// Two fully connected layers, ELU between them, linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    /// ELU between the layers; disabled only for linear test builds.
    pub hidden_activation: bool,
    act: Elu,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(inputs, hidden, rng),
            fc2: Linear::new(hidden, outputs, rng),
            hidden_activation: true,
            act: Elu::default(),
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = self.fc1.forward(x);
        if self.hidden_activation {
            h = self.act.forward(&h);
        }
        self.fc2.forward(&h)
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let mut d = self.fc2.backward(dy);
        if self.hidden_activation {
            d = self.act.backward(&d);
        }
        self.fc1.backward(&d)
    }
}

impl Module for Mlp {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// `g = σ(x_m ⊙ x_n)`.
pub fn gate(x_m: &[f64], x_n: &[f64]) -> Result<Vec<f64>> {
    check_len(x_m.len(), x_n.len())?;
    Ok(x_m.iter().zip(x_n).map(|(a, b)| sigmoid(a * b)).collect())
}

/// `m = x + g ⊙ x`.
pub fn supplement(x_n: &[f64], g_n: &[f64]) -> Result<Vec<f64>> {
    check_len(x_n.len(), g_n.len())?;
    Ok(x_n.iter().zip(g_n).map(|(x, g)| x + g * x).collect())
}

/// Per-sample view of one interaction pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StageVectorSet {
    /// `(stage, x_n)` in increasing stage order.
    pub x: Vec<(usize, Vec<f64>)>,
    pub x_m: Vec<f64>,
    pub g: Vec<(usize, Vec<f64>)>,
    pub m: Vec<(usize, Vec<f64>)>,
}

/// Batched result of [`Interaction::forward`]. Index `i` of every list
/// refers to the `i`-th interacting stage.
#[derive(Debug, Clone)]
pub struct InteractionOutput {
    pub x_m: Array2<f64>,
    pub g: Vec<Array2<f64>>,
    pub m: Vec<Array2<f64>>,
}

/// Stage vectors, mutual vector and gates of the last forward pass.
type InteractionCache = (Vec<Array2<f64>>, Array2<f64>, Vec<Array2<f64>>);

/// The mutual-vector MLP plus the gate/supplement arithmetic.
#[derive(Debug, Clone)]
pub struct Interaction {
    pub config: InteractionConfig,
    pub mlp: Mlp,
    cache: Option<InteractionCache>,
}

impl Interaction {
    pub fn new<R: Rng + ?Sized>(config: InteractionConfig, rng: &mut R) -> Self {
        let mlp = Mlp::new(config.stage_num * config.c, config.mlp_hidden, config.c, rng);
        Self {
            config,
            mlp,
            cache: None,
        }
    }

    fn check_inputs(&self, xs: &[Array2<f64>]) -> Result<()> {
        if xs.len() != self.config.stage_num {
            return Err(Error::ArityMismatch {
                expected: self.config.stage_num,
                actual: xs.len(),
            });
        }
        for x in xs {
            check_len(self.config.c, x.dim().1)?;
        }
        Ok(())
    }

    /// `x_m = f_m(concat(x_1..x_S))` for a batch of stage vectors.
    pub fn mutual_vector(&mut self, xs: &[Array2<f64>]) -> Result<Array2<f64>> {
        self.check_inputs(xs)?;
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let cat = concatenate(Axis(1), &views).expect("equal batch sizes");
        Ok(self.mlp.forward(&cat))
    }

    pub fn forward(&mut self, xs: &[Array2<f64>]) -> Result<InteractionOutput> {
        let x_m = self.mutual_vector(xs)?;
        let mut gs = Vec::with_capacity(xs.len());
        let mut ms = Vec::with_capacity(xs.len());
        for x in xs {
            let g = ndarray::Zip::from(&x_m).and(x).map_collect(|&a, &b| sigmoid(a * b));
            let m = ndarray::Zip::from(x).and(&g).map_collect(|&x, &g| x + g * x);
            gs.push(g);
            ms.push(m);
        }
        self.cache = Some((xs.to_vec(), x_m.clone(), gs.clone()));
        Ok(InteractionOutput { x_m, g: gs, m: ms })
    }

    /// Gradients with respect to each `x_n`, given gradients on each `m_n`
    /// (`None` means zero) and an optional direct gradient on `x_m`.
    pub fn backward(&mut self, dms: &[Option<Array2<f64>>], dxm_direct: Option<&Array2<f64>>) -> Vec<Array2<f64>> {
        let (xs, x_m, gs) = self.cache.as_ref().expect("Interaction::backward before forward");
        let mut dxm = match dxm_direct {
            Some(d) => d.clone(),
            None => Array2::zeros(x_m.dim()),
        };
        let mut dxs: Vec<Array2<f64>> = xs.iter().map(|x| Array2::zeros(x.dim())).collect();
        for (i, dm) in dms.iter().enumerate() {
            let Some(dm) = dm else { continue };
            let (x, g) = (&xs[i], &gs[i]);
            // m = x (1 + g),  g = σ(z),  z = x_m x
            let dz = ndarray::Zip::from(dm).and(x).and(g).map_collect(|&d, &x, &g| d * x * g * (1.0 - g));
            ndarray::Zip::from(&mut dxs[i])
                .and(dm)
                .and(g)
                .and(&dz)
                .and(x_m)
                .for_each(|o, &d, &g, &dz, &xm| *o += d * (1.0 + g) + dz * xm);
            ndarray::Zip::from(&mut dxm).and(&dz).and(x).for_each(|o, &dz, &x| *o += dz * x);
        }
        let dcat = self.mlp.backward(&dxm);
        let c = self.config.c;
        for (i, dx) in dxs.iter_mut().enumerate() {
            *dx += &dcat.slice(s![.., i * c..(i + 1) * c]);
        }
        dxs
    }

    /// Single-sample convenience wrapper returning every intermediate.
    pub fn interact(&mut self, stages: &[usize], x: &[Vec<f64>]) -> Result<StageVectorSet> {
        if x.len() != self.config.stage_num || stages.len() != x.len() {
            return Err(Error::ArityMismatch {
                expected: self.config.stage_num,
                actual: x.len(),
            });
        }
        let batch: Vec<Array2<f64>> = x
            .iter()
            .map(|v| Array1::from(v.clone()).insert_axis(Axis(0)))
            .collect();
        let out = self.forward(&batch)?;
        let row = |a: &Array2<f64>| a.row(0).to_vec();
        Ok(StageVectorSet {
            x: stages.iter().copied().zip(x.iter().cloned()).collect(),
            x_m: row(&out.x_m),
            g: stages.iter().copied().zip(out.g.iter().map(row)).collect(),
            m: stages.iter().copied().zip(out.m.iter().map(row)).collect(),
        })
    }
}

impl Module for Interaction {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
}

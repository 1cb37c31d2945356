//! Stage-partitioned feature extractors.
//!
//! A backbone is any ordered list of layers with known output channel
//! counts. A new stage starts wherever the channel count strictly
//! increases; the feature map a stage emits is the output of its last
//! layer.

use std::fmt::Write as _;
use std::ops::Range;

use ndarray::Array4;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm, Conv2d, Elu, Mode, Module, Slot};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePartition {
    /// First layer index of every stage; `starts[0] == 0`.
    starts: Vec<usize>,
    channels_per_stage: Vec<usize>,
    layer_count: usize,
}

impl StagePartition {
    /// Total stage count `N`.
    pub fn stages(&self) -> usize {
        self.starts.len()
    }

    /// Layer indices at which stages 2..=N begin.
    pub fn boundaries(&self) -> &[usize] {
        &self.starts[1..]
    }

    pub fn channels_per_stage(&self) -> &[usize] {
        &self.channels_per_stage
    }

    /// Layer range of 1-based stage `n`.
    pub fn layers(&self, n: usize) -> Range<usize> {
        let start = self.starts[n - 1];
        let end = self.starts.get(n).copied().unwrap_or(self.layer_count);
        start..end
    }

    pub fn channels(&self, n: usize) -> usize {
        self.channels_per_stage[n - 1]
    }
}

/// Splits a per-layer output channel profile into stages.
pub fn partition_stages(profile: &[usize]) -> Result<StagePartition> {
    if profile.is_empty() {
        return Err(Error::EmptyProfile);
    }
    let mut starts = vec![0];
    for i in 1..profile.len() {
        if profile[i] > profile[i - 1] {
            starts.push(i);
        }
    }
    let channels_per_stage = starts
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let end = starts.get(k + 1).copied().unwrap_or(profile.len());
            profile[end - 1]
        })
        .collect();
    Ok(StagePartition {
        starts,
        channels_per_stage,
        layer_count: profile.len(),
    })
}

/// Adapter contract for backbones: layer-level forward and backward passes
/// over NCHW batches plus channel metadata.
pub trait StageBackbone: Module {
    /// Output channel count of every layer, in order.
    fn layer_channels(&self) -> Vec<usize>;

    /// Expected `(channels, height, width)` of one input.
    fn input_shape(&self) -> (usize, usize, usize);

    fn forward_layers(&mut self, x: &Array4<f64>, layers: Range<usize>, mode: Mode) -> Array4<f64>;

    /// Backward through `layers` (in reverse) using the caches of the most
    /// recent forward.
    fn backward_layers(&mut self, dy: &Array4<f64>, layers: Range<usize>) -> Array4<f64>;
}

/// Feature maps at the end of every stage, paired with their 1-based stage index.
#[derive(Debug, Clone)]
pub struct StageFeatureMaps {
    pub maps: Vec<(usize, Array4<f64>)>,
}

impl StageFeatureMaps {
    pub fn stage(&self, n: usize) -> &Array4<f64> {
        &self.maps[n - 1].1
    }
}

fn check_input<B: StageBackbone + ?Sized>(backbone: &B, x: &Array4<f64>) -> Result<()> {
    let (c, h, w) = backbone.input_shape();
    let (_, xc, xh, xw) = x.dim();
    if (xc, xh, xw) != (c, h, w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{c}x{h}x{w}"),
            actual: format!("{xc}x{xh}x{xw}"),
        });
    }
    Ok(())
}

/// One pass over the whole backbone emitting every stage's map.
pub fn forward_stages<B: StageBackbone + ?Sized>(
    backbone: &mut B,
    partition: &StagePartition,
    x: &Array4<f64>,
    mode: Mode,
) -> Result<StageFeatureMaps> {
    check_input(backbone, x)?;
    let mut maps = Vec::with_capacity(partition.stages());
    let mut cur = x.clone();
    for n in 1..=partition.stages() {
        cur = backbone.forward_layers(&cur, partition.layers(n), mode);
        maps.push((n, cur.clone()));
    }
    Ok(StageFeatureMaps { maps })
}

/// Backpropagates gradients injected at stage outputs. Returns the total
/// gradient at each stage output (direct plus everything flowing back from
/// deeper stages); stages deeper than the deepest injected gradient get `None`.
pub fn backward_stages<B: StageBackbone + ?Sized>(
    backbone: &mut B,
    partition: &StagePartition,
    grads: &[Option<Array4<f64>>],
) -> Vec<Option<Array4<f64>>> {
    let n_stages = partition.stages();
    let mut totals: Vec<Option<Array4<f64>>> = vec![None; n_stages];
    let Some(deepest) = (0..n_stages).rev().find(|&i| grads.get(i).is_some_and(|g| g.is_some())) else {
        return totals;
    };
    let mut running: Option<Array4<f64>> = None;
    for i in (0..=deepest).rev() {
        let total = match (running.take(), grads.get(i).and_then(|g| g.as_ref())) {
            (Some(r), Some(g)) => r + g,
            (Some(r), None) => r,
            (None, Some(g)) => g.clone(),
            (None, None) => unreachable!("deepest stage carries a gradient"),
        };
        let below = backbone.backward_layers(&total, partition.layers(i + 1));
        totals[i] = Some(total);
        if i > 0 {
            running = Some(below);
        }
    }
    totals
}

/// Text description of a plain conv backbone (`key = value` lines).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub stages: usize,
    pub channels: Vec<usize>,
    pub input_size: usize,
    pub input_channels: usize,
    pub layers_per_stage: usize,
    pub norm: bool,
    pub bias: bool,
}

impl Default for BackboneSpec {
    /// TinyNet: five stride-2 stages of widths 8..128 on 64×64 RGB.
    fn default() -> Self {
        Self {
            stages: 5,
            channels: vec![8, 16, 32, 64, 128],
            input_size: 64,
            input_channels: 3,
            layers_per_stage: 1,
            norm: true,
            bias: false,
        }
    }
}

pub(crate) fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl BackboneSpec {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("backbone.{key}: cannot parse `{value}`"));
        match key {
            "stages" => self.stages = value.parse().map_err(|_| bad())?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|c| c.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?
            }
            "input_size" => self.input_size = value.parse().map_err(|_| bad())?,
            "input_channels" => self.input_channels = value.parse().map_err(|_| bad())?,
            "layers_per_stage" => self.layers_per_stage = value.parse().map_err(|_| bad())?,
            "norm" => self.norm = parse_bool(value).ok_or_else(bad)?,
            "bias" => self.bias = parse_bool(value).ok_or_else(bad)?,
            _ => return Err(Error::Config(format!("unknown backbone key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "stages = {}", self.stages);
        let _ = writeln!(s, "channels = {}", channels.join(","));
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "layers_per_stage = {}", self.layers_per_stage);
        let _ = writeln!(s, "norm = {}", self.norm);
        let _ = writeln!(s, "bias = {}", self.bias);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.channels.len() != self.stages {
            return Err(Error::Config(format!(
                "backbone: {} stages but {} channel entries",
                self.stages,
                self.channels.len()
            )));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("backbone: stage channels must strictly increase".into()));
        }
        if self.layers_per_stage == 0 || self.input_channels == 0 {
            return Err(Error::Config("backbone: zero-sized layer spec".into()));
        }
        if !self.input_size.is_multiple_of(1 << self.stages) {
            return Err(Error::Config(format!(
                "backbone: input_size {} not divisible by 2^{}",
                self.input_size, self.stages
            )));
        }
        Ok(())
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ConvNet> {
        self.validate()?;
        let mut layers = Vec::new();
        let mut in_ch = self.input_channels;
        for &out_ch in &self.channels {
            for j in 0..self.layers_per_stage {
                let stride = if j == 0 { 2 } else { 1 };
                layers.push(ConvUnit::new(in_ch, out_ch, stride, self.norm, self.bias, rng));
                in_ch = out_ch;
            }
        }
        Ok(ConvNet {
            layers,
            input_channels: self.input_channels,
            input_size: self.input_size,
        })
    }
}

/// 3×3 convolution, optional batch norm, ELU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm>,
    act: Elu,
}

impl ConvUnit {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        norm: bool,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, 3, stride, 1, bias, rng),
            norm: norm.then(|| BatchNorm::new(out_ch)),
            act: Elu::default(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &mut self.norm {
            y = bn.forward(&y, mode);
        }
        self.act.forward(&y)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mut d = self.act.backward(dy);
        if let Some(bn) = &mut self.norm {
            d = bn.backward(&d);
        }
        self.conv.backward(&d)
    }
}

impl Module for ConvUnit {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.norm {
            bn.visit(&join(prefix, "bn"), f);
        }
    }
}

/// Plain stack of [`ConvUnit`]s built from a [`BackboneSpec`].
#[derive(Debug, Clone)]
pub struct ConvNet {
    pub layers: Vec<ConvUnit>,
    input_channels: usize,
    input_size: usize,
}

impl StageBackbone for ConvNet {
    fn layer_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.conv.out_channels()).collect()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.input_channels, self.input_size, self.input_size)
    }

    fn forward_layers(&mut self, x: &Array4<f64>, layers: Range<usize>, mode: Mode) -> Array4<f64> {
        let mut cur = x.clone();
        for layer in &mut self.layers[layers] {
            cur = layer.forward(&cur, mode);
        }
        cur
    }

    fn backward_layers(&mut self, dy: &Array4<f64>, layers: Range<usize>) -> Array4<f64> {
        let mut cur = dy.clone();
        for layer in self.layers[layers].iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }
}

impl Module for ConvNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Counts strict increases with a plain scan; independent of `partition_stages`.
    fn scan_stage_count(profile: &[usize]) -> usize {
        let mut n = 1;
        let mut prev = profile[0];
        for &c in &profile[1..] {
            if c > prev {
                n += 1;
            }
            prev = c;
        }
        n
    }

    #[test]
    fn partition_examples() {
        let p = partition_stages(&[16, 16, 24, 24, 32]).unwrap();
        assert_eq!(p.stages(), 3);
        assert_eq!(p.boundaries(), &[2, 4]);
        assert_eq!(p.channels_per_stage(), &[16, 24, 32]);
        assert_eq!(p.layers(2), 2..4);

        assert_eq!(partition_stages(&[64, 64, 64]).unwrap().stages(), 1);
        assert!(matches!(partition_stages(&[]), Err(Error::EmptyProfile)));

        let mobilenet = [32, 16, 24, 32, 64, 96, 160, 320, 1280];
        let p = partition_stages(&mobilenet).unwrap();
        assert_eq!(p.stages(), scan_stage_count(&mobilenet));
        assert_eq!(p.stages(), 8);
        assert_eq!(p.layers(1), 0..2);
    }

    #[test]
    fn partition_is_idempotent_on_stage_profile() {
        let p = partition_stages(&[8, 8, 16, 16, 16, 32]).unwrap();
        let q = partition_stages(p.channels_per_stage()).unwrap();
        assert_eq!(q.channels_per_stage(), p.channels_per_stage());
        assert_eq!(q.stages(), p.stages());
    }

    #[test]
    fn tinynet_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = BackboneSpec::default().build(&mut rng).unwrap();
        let part = partition_stages(&net.layer_channels()).unwrap();
        assert_eq!(part.stages(), 5);
        let x = Array4::from_shape_simple_fn((2, 3, 64, 64), || rng.gen_range(0.0..1.0));
        let maps = forward_stages(&mut net, &part, &x, Mode::Train).unwrap();
        // Each stride-2 3x3 conv with padding 1 halves the side: 64/2^n.
        let mut side = 64;
        let mut expected = Vec::new();
        for &c in &[8, 16, 32, 64, 128] {
            side = (side + 2 - 3) / 2 + 1;
            expected.push((c, side));
        }
        let got: Vec<(usize, usize)> = maps.maps.iter().map(|(_, m)| (m.dim().1, m.dim().2)).collect();
        assert_eq!(got, expected);
        assert_eq!(got.iter().map(|g| g.1).collect::<Vec<_>>(), vec![32, 16, 8, 4, 2]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = BackboneSpec::default().build(&mut rng).unwrap();
        let part = partition_stages(&net.layer_channels()).unwrap();
        let x = Array4::<f64>::zeros((1, 3, 32, 32));
        assert!(matches!(forward_stages(&mut net, &part, &x, Mode::Eval), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn eval_mode_is_deterministic_and_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = BackboneSpec {
            layers_per_stage: 2,
            ..BackboneSpec::default()
        };
        let mut net = spec.build(&mut rng).unwrap();
        let part = partition_stages(&net.layer_channels()).unwrap();
        assert_eq!(part.stages(), 5);
        let x = Array4::from_shape_simple_fn((1, 3, 64, 64), || rng.gen_range(0.0..1.0));
        let a = forward_stages(&mut net, &part, &x, Mode::Eval).unwrap();
        let b = forward_stages(&mut net, &part, &x, Mode::Eval).unwrap();
        let mut cur = x.clone();
        for n in 1..=5 {
            assert_eq!(a.stage(n), b.stage(n));
            cur = net.forward_layers(&cur, part.layers(n), Mode::Eval);
            assert_eq!(&cur, a.stage(n));
        }
    }

    #[test]
    fn zero_image_through_linear_variant_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = BackboneSpec {
            norm: false,
            bias: false,
            ..BackboneSpec::default()
        };
        let mut net = spec.build(&mut rng).unwrap();
        let part = partition_stages(&net.layer_channels()).unwrap();
        let maps = forward_stages(&mut net, &part, &Array4::zeros((1, 3, 64, 64)), Mode::Train).unwrap();
        assert!(maps.maps.iter().all(|(_, m)| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = BackboneSpec::parse("stages = 3\nchannels = 4, 8, 16\ninput_size = 32 # small\nnorm = false\n").unwrap();
        assert_eq!(spec.channels, vec![4, 8, 16]);
        assert!(!spec.norm);
        assert_eq!(BackboneSpec::parse(&spec.to_text()).unwrap(), spec);
        assert!(BackboneSpec::parse("stages = 2\nchannels = 8\n").is_err());
        assert!(BackboneSpec::parse("depth = 2\n").is_err());
    }

    #[test]
    fn stage_gradients_accumulate_downstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = BackboneSpec {
            stages: 2,
            channels: vec![2, 3],
            input_size: 8,
            input_channels: 1,
            ..BackboneSpec::default()
        };
        let mut net = spec.build(&mut rng).unwrap();
        let part = partition_stages(&net.layer_channels()).unwrap();
        let x = Array4::from_shape_simple_fn((2, 1, 8, 8), || rng.gen_range(-1.0..1.0));
        let maps = forward_stages(&mut net, &part, &x, Mode::Train).unwrap();
        let g2 = Array4::from_shape_simple_fn(maps.stage(2).dim(), || rng.gen_range(-1.0..1.0));
        let totals = backward_stages(&mut net, &part, &[None, Some(g2.clone())]);
        assert_eq!(totals[1].as_ref().unwrap(), &g2);
        let t1 = totals[0].as_ref().unwrap();
        assert_eq!(t1.dim(), maps.stage(1).dim());
        assert!(t1.iter().any(|&v| v != 0.0));
    }
}

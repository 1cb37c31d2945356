//! Prediction combination, accuracy, corruption robustness and Grad-CAM.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{apply_transform, Dataset, TransformSpec};
use crate::error::{Error, Result};
use crate::heads::PredictionBundle;
use crate::image::{ImageTensor, ValueRange};
use crate::model::{HeadId, Heads, Model};
use crate::nn::{Mode, Module};

const EVAL_BATCH: usize = 16;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_concat(bundle: &PredictionBundle) -> usize {
    argmax(&bundle.y_hat_concat)
}

/// Argmax of the summed stage and concatenation probabilities.
pub fn predict_mix(bundle: &PredictionBundle) -> Result<usize> {
    let k = bundle.y_hat_concat.len();
    let mut sum = vec![0.0; k];
    for p in bundle.y_hat.values() {
        if p.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                actual: p.len(),
            });
        }
        sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    sum.iter_mut().zip(&bundle.y_hat_concat).for_each(|(s, v)| *s += v);
    Ok(argmax(&sum))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub acc_concat: f64,
    pub acc_mix: f64,
    pub per_stage_acc: BTreeMap<usize, f64>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_bundles(bundles: &[PredictionBundle], labels: &[usize]) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        if bundles.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: bundles.len(),
                actual: labels.len(),
            });
        }
        let n = bundles.len() as f64;
        let mut concat = 0usize;
        let mut mix = 0usize;
        let mut stage: BTreeMap<usize, usize> = bundles[0].y_hat.keys().map(|&k| (k, 0)).collect();
        for (b, &y) in bundles.iter().zip(labels) {
            concat += usize::from(predict_concat(b) == y);
            mix += usize::from(predict_mix(b)? == y);
            for (s, p) in &b.y_hat {
                *stage.entry(*s).or_default() += usize::from(argmax(p) == y);
            }
        }
        Ok(Self {
            acc_concat: concat as f64 / n,
            acc_mix: mix as f64 / n,
            per_stage_acc: stage.into_iter().map(|(s, c)| (s, c as f64 / n)).collect(),
            n_samples: bundles.len(),
        })
    }
}

/// Eval-mode predictions for every sample, with `prepare` applied to each
/// transformed image before the forward pass.
pub fn predict_dataset(
    model: &mut Model,
    dataset: &Dataset,
    transform: &TransformSpec,
    mut prepare: impl FnMut(usize, ImageTensor) -> Result<ImageTensor>,
) -> Result<(Vec<PredictionBundle>, Vec<usize>)> {
    if dataset.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    // Eval transforms are deterministic; the generator is never drawn from.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bundles = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut images = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let img = apply_transform(&dataset.samples[i].load()?, transform, &mut rng)?;
            images.push(prepare(i, img)?);
        }
        let refs: Vec<&ImageTensor> = images.iter().collect();
        bundles.extend(model.predict(&refs)?);
    }
    Ok((bundles, dataset.labels()))
}

/// One forward per untouched image.
pub fn evaluate(model: &mut Model, dataset: &Dataset, transform: &TransformSpec) -> Result<EvalReport> {
    let (bundles, labels) = predict_dataset(model, dataset, transform, |_, img| Ok(img))?;
    EvalReport::from_bundles(&bundles, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    ColorJitter,
    GaussianNoise,
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color_jitter" | "jitter" => Ok(Self::ColorJitter),
            "gaussian_noise" | "noise" => Ok(Self::GaussianNoise),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ColorJitter => "color_jitter",
            Self::GaussianNoise => "gaussian_noise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub jitter_coefficient: f64,
    /// Byte-scale mean of the added noise.
    pub noise_mean: f64,
    /// Byte-scale standard deviation of the added noise.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn jitter(coefficient: f64, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::ColorJitter,
            jitter_coefficient: coefficient,
            noise_mean: 0.0,
            noise_amplitude: 0.0,
            seed,
        }
    }

    pub fn noise(mean: f64, amplitude: f64, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::GaussianNoise,
            jitter_coefficient: 0.0,
            noise_mean: mean,
            noise_amplitude: amplitude,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = |v: f64| v >= 0.0;
        if !non_negative(self.jitter_coefficient) || !non_negative(self.noise_amplitude) || !self.noise_mean.is_finite() {
            return Err(Error::Config(format!("invalid corruption parameters {self:?}")));
        }
        Ok(())
    }

    /// Row label in the robustness table.
    pub fn label(&self) -> String {
        match self.kind {
            CorruptionKind::ColorJitter => format!("+Color-Jitter({})", self.jitter_coefficient),
            CorruptionKind::GaussianNoise => format!("+Gaussian-Noise({})", self.noise_amplitude),
        }
    }
}

/// `x · f + anchor · (1 - f)`, so `f = 1` returns `x` bit for bit.
fn blend(x: f32, anchor: f32, f: f32, range: ValueRange) -> f32 {
    range.clamp(x * f + anchor * (1.0 - f))
}

fn luma(image: &ImageTensor, y: usize, x: usize) -> f32 {
    0.299 * image.get(y, x, 0) + 0.587 * image.get(y, x, 1) + 0.114 * image.get(y, x, 2)
}

fn jitter_factor<R: Rng + ?Sized>(coef: f64, rng: &mut R) -> f32 {
    let lo = (1.0 - coef).max(0.0);
    let hi = 1.0 + coef;
    if hi > lo {
        rng.gen_range(lo..=hi) as f32
    } else {
        1.0
    }
}

/// Corrupts one image, drawing randomness from `rng`.
pub fn corrupt_with_rng<R: Rng + ?Sized>(image: &ImageTensor, spec: &CorruptionSpec, rng: &mut R) -> Result<ImageTensor> {
    spec.validate()?;
    let range = image.range();
    let mut out = image.clone();
    match spec.kind {
        CorruptionKind::ColorJitter => {
            let fb = jitter_factor(spec.jitter_coefficient, rng);
            let fc = jitter_factor(spec.jitter_coefficient, rng);
            let fs = jitter_factor(spec.jitter_coefficient, rng);
            out.values_mut().iter_mut().for_each(|v| *v = blend(*v, 0.0, fb, range));
            let rgb = out.channels() == 3;
            let (h, w) = (out.height(), out.width());
            let mean = if rgb {
                let mut total = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        total += luma(&out, y, x) as f64;
                    }
                }
                (total / (h * w) as f64) as f32
            } else {
                (out.values().iter().map(|&v| v as f64).sum::<f64>() / out.values().len() as f64) as f32
            };
            out.values_mut().iter_mut().for_each(|v| *v = blend(*v, mean, fc, range));
            if rgb {
                for y in 0..h {
                    for x in 0..w {
                        let gray = luma(&out, y, x);
                        for c in 0..3 {
                            let v = out.get(y, x, c);
                            out.set(y, x, c, blend(v, gray, fs, range));
                        }
                    }
                }
            }
        }
        CorruptionKind::GaussianNoise => {
            let scale = range.max() as f64 / 255.0;
            if spec.noise_amplitude > 0.0 || spec.noise_mean != 0.0 {
                let normal = Normal::new(spec.noise_mean * scale, spec.noise_amplitude * scale)
                    .map_err(|e| Error::Config(e.to_string()))?;
                out.values_mut()
                    .iter_mut()
                    .for_each(|v| *v = range.clamp(*v + normal.sample(rng) as f32));
            }
        }
    }
    Ok(out)
}

/// Corrupts one image with a generator seeded from `spec.seed`.
pub fn corrupt(image: &ImageTensor, spec: &CorruptionSpec) -> Result<ImageTensor> {
    corrupt_with_rng(image, spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub label: String,
    pub report: EvalReport,
    pub delta_concat: f64,
    pub delta_mix: f64,
}

/// Clean row first, then one row per corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,acc_concat,acc_mix,delta_concat,delta_mix\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.label, r.report.acc_concat, r.report.acc_mix, r.delta_concat, r.delta_mix
            );
        }
        out
    }

    /// Aligned text table; accuracies and deltas in percent.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Condition".len());
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            "Condition", "Concat", "Mix", "dConcat", "dMix"
        );
        let _ = writeln!(out, "{}", "-".repeat(width + 40));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.2}  {:>8.2}  {:>+8.2}  {:>+8.2}",
                r.label,
                100.0 * r.report.acc_concat,
                100.0 * r.report.acc_mix,
                100.0 * r.delta_concat,
                100.0 * r.delta_mix
            );
        }
        out
    }
}

/// Clean evaluation plus one corrupted evaluation per spec. Each sample's
/// corruption randomness comes from a generator seeded by the spec and
/// consumed in dataset order.
pub fn robustness_eval(
    model: &mut Model,
    dataset: &Dataset,
    transform: &TransformSpec,
    specs: &[CorruptionSpec],
) -> Result<RobustnessReport> {
    let clean = evaluate(model, dataset, transform)?;
    let mut rows = vec![RobustnessRow {
        label: "clean".into(),
        report: clean.clone(),
        delta_concat: 0.0,
        delta_mix: 0.0,
    }];
    for spec in specs {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (bundles, labels) = predict_dataset(model, dataset, transform, |_, img| corrupt_with_rng(&img, spec, &mut rng))?;
        let report = EvalReport::from_bundles(&bundles, &labels)?;
        rows.push(RobustnessRow {
            label: spec.label(),
            delta_concat: report.acc_concat - clean.acc_concat,
            delta_mix: report.acc_mix - clean.acc_mix,
            report,
        });
    }
    Ok(RobustnessReport { rows })
}

/// ReLU of the channel combination weighted by spatially averaged gradients.
/// `map` and `grad` are `(C, h, w)`.
pub fn cam_from(map: ArrayView3<'_, f64>, grad: ArrayView3<'_, f64>) -> Array2<f64> {
    let (_, h, w) = map.dim();
    let mut cam = Array2::<f64>::zeros((h, w));
    for (a, g) in map.axis_iter(Axis(0)).zip(grad.axis_iter(Axis(0))) {
        let alpha = g.mean().unwrap_or(0.0);
        cam.scaled_add(alpha, &a);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    cam
}

/// Bilinear resampling with half-pixel centers.
pub fn upsample_bilinear(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let coord = |i: usize, out: usize, inp: usize| {
        let c = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, c - i0 as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, height, sh);
        let (x0, x1, fx) = coord(x, width, sw);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Scales by the maximum so values lie in `[0, 1]`; an all-zero map stays zero.
pub fn normalize_cam(cam: &mut Array2<f64>) {
    let max = cam.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        cam.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamResult {
    pub stage: usize,
    pub target_class: usize,
    /// Input-sized heatmap in `[0, 1]`.
    pub heatmap: Array2<f64>,
}

impl CamResult {
    pub fn to_image(&self) -> ImageTensor {
        let (h, w) = self.heatmap.dim();
        ImageTensor::from_fn(h, w, 1, ValueRange::UnitFloat, |y, x, _| self.heatmap[[y, x]] as f32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_image().save(path)
    }
}

/// Output file name for one (input, stage) heatmap.
pub fn cam_file_name(stem: &str, stage: usize, extension: &str) -> String {
    format!("{stem}_stage{stage}_cam.{extension}")
}

/// Grad-CAM of stage `n`'s feature map for the stage-`n` classifier's logit of
/// `target` (the Mix prediction when `None`). Leaves all gradients zeroed.
pub fn gradcam(model: &mut Model, image: &ImageTensor, stage: usize, target: Option<usize>) -> Result<CamResult> {
    if !model.interacting_stages().contains(&stage) {
        return Err(Error::UnknownStage(stage));
    }
    let batch = model.batch(&[image])?;
    let out = model.forward(&batch, Mode::Eval, Heads::All)?;
    let target_class = match target {
        Some(t) if t >= model.classes() => {
            return Err(Error::Config(format!("target class {t} out of range")));
        }
        Some(t) => t,
        None => {
            let bundle = PredictionBundle {
                y_hat: out.stage_probs.iter().map(|(&n, p)| (n, p.row(0).to_vec())).collect(),
                y_hat_concat: out.concat_probs.as_ref().expect("all heads").row(0).to_vec(),
                m_concat: Vec::new(),
            };
            predict_mix(&bundle)?
        }
    };
    let mut onehot = Array2::<f64>::zeros((1, model.classes()));
    onehot[[0, target_class]] = 1.0;
    let back = model.backward(HeadId::Stage(stage), &onehot, true)?;
    model.zero_grad();
    let grad = back.stage_map_grads[stage - 1].as_ref().expect("stage feeds its own head");
    let map = out.maps.stage(stage);
    let cam = cam_from(map.index_axis(Axis(0), 0), grad.index_axis(Axis(0), 0));
    let mut heatmap = upsample_bilinear(&cam, image.height(), image.width());
    normalize_cam(&mut heatmap);
    Ok(CamResult {
        stage,
        target_class,
        heatmap,
    })
}

//! The full network: backbone, smooth conv blocks, interaction, heads.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backward_stages, forward_stages, partition_stages, BackboneSpec, ConvNet, StageBackbone, StageFeatureMaps, StagePartition,
};
use crate::error::{Error, Result};
use crate::heads::{Classifier, PredictionBundle};
use crate::image::ImageTensor;
use crate::msi::{Interaction, InteractionConfig, SmoothConvBlock};
use crate::nn::{join, Mode, Module, Slot};

/// Per-channel affine input normalization `(v - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// ImageNet statistics, for backbones carrying pretrained weights.
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub stage_num: usize,
    pub c: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    /// Gate/supplement interaction; when off, `m_n = x_n`.
    pub interaction: bool,
    pub input_norm: Option<Normalization>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            stage_num: 3,
            c: 128,
            mlp_hidden: 128,
            classes: 4,
            interaction: true,
            input_norm: None,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeadId {
    Stage(usize),
    Concat,
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadId::Stage(n) => write!(f, "{n}"),
            HeadId::Concat => f.write_str("concat"),
        }
    }
}

/// Which parameters a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Backbone layers of the given 1-based stage.
    Backbone(usize),
    Smooth(usize),
    Mlp,
    Head(HeadId),
}

impl ParamGroup {
    /// Backbone parameters count as pretrained; everything else is newly added.
    pub fn is_backbone(&self) -> bool {
        matches!(self, ParamGroup::Backbone(_))
    }
}

/// Which classifier heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    None,
    Only(HeadId),
    All,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Stage vectors `x_n`, one `(B, c)` array per interacting stage.
    pub x: Vec<Array2<f64>>,
    pub x_m: Option<Array2<f64>>,
    pub g: Vec<Array2<f64>>,
    pub m: Vec<Array2<f64>>,
    pub m_concat: Array2<f64>,
    pub stage_probs: BTreeMap<usize, Array2<f64>>,
    pub concat_probs: Option<Array2<f64>>,
    /// Backbone feature maps at every stage output.
    pub maps: StageFeatureMaps,
}

/// Parameters a backward pass produced gradients for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsedParams {
    /// Backbone stages `1..=backbone_depth` received gradients.
    pub backbone_depth: usize,
    pub smooth: Vec<usize>,
    pub mlp: bool,
    pub head: HeadId,
}

impl UsedParams {
    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone(n) => n <= self.backbone_depth,
            ParamGroup::Smooth(n) => self.smooth.contains(&n),
            ParamGroup::Mlp => self.mlp,
            ParamGroup::Head(h) => h == self.head,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub used: UsedParams,
    /// Total gradient at every backbone stage output (index `n - 1`).
    pub stage_map_grads: Vec<Option<Array4<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub forward_passes: usize,
    pub backward_passes: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub backbone: ConvNet,
    partition: StagePartition,
    pub smooth: Vec<SmoothConvBlock>,
    pub interaction: Option<Interaction>,
    pub stage_heads: Vec<Classifier>,
    pub concat_head: Classifier,
    pub counters: Counters,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", config.classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let backbone = config.backbone.build(&mut rng)?;
        let partition = partition_stages(&backbone.layer_channels())?;
        let n = partition.stages();
        let icfg = InteractionConfig {
            stage_num: config.stage_num,
            c: config.c,
            mlp_hidden: config.mlp_hidden,
        };
        icfg.validate(n)?;
        let first = n - config.stage_num + 1;
        let smooth = (first..=n)
            .map(|s| SmoothConvBlock::new(partition.channels(s), config.c, &mut rng))
            .collect();
        let interaction = config.interaction.then(|| Interaction::new(icfg, &mut rng));
        let stage_heads = (first..=n)
            .map(|_| Classifier::new(config.c, config.classes, &mut rng))
            .collect();
        let concat_width = if config.stage_num == 1 && config.interaction {
            2 * config.c
        } else {
            config.stage_num * config.c
        };
        let concat_head = Classifier::new(concat_width, config.classes, &mut rng);
        Ok(Self {
            config,
            backbone,
            partition,
            smooth,
            interaction,
            stage_heads,
            concat_head,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn partition(&self) -> &StagePartition {
        &self.partition
    }

    /// Total backbone stage count `N`.
    pub fn stages(&self) -> usize {
        self.partition.stages()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Interacting stages `N - StageNum + 1 ..= N`, ascending.
    pub fn interacting_stages(&self) -> Vec<usize> {
        let n = self.stages();
        (n - self.config.stage_num + 1..=n).collect()
    }

    fn stage_slot(&self, stage: usize) -> Result<usize> {
        let first = self.stages() - self.config.stage_num + 1;
        if stage < first || stage > self.stages() {
            return Err(Error::UnknownStage(stage));
        }
        Ok(stage - first)
    }

    /// Converts images into a normalized `(B, C, H, W)` batch.
    pub fn batch(&self, images: &[&ImageTensor]) -> Result<Array4<f64>> {
        let (c, h, w) = self.backbone.input_shape();
        let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
        for (b, img) in images.iter().enumerate() {
            if (img.channels(), img.height(), img.width()) != (c, h, w) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{h}x{w}x{c}"),
                    actual: format!("{}x{}x{}", img.height(), img.width(), img.channels()),
                });
            }
            let scale = 1.0 / img.range().max() as f64;
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let mut v = img.get(y, x, ch) as f64 * scale;
                        if let Some(norm) = &self.config.input_norm {
                            v = (v - norm.mean[ch % 3]) / norm.std[ch % 3];
                        }
                        out[[b, ch, y, x]] = v;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, input: &Array4<f64>, mode: Mode, heads: Heads) -> Result<ForwardOutput> {
        if input.dim().0 == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Heads::Only(HeadId::Stage(n)) = heads {
            self.stage_slot(n)?;
        }
        self.counters.forward_passes += 1;
        let maps = forward_stages(&mut self.backbone, &self.partition, input, mode)?;
        let stages = self.interacting_stages();
        let mut xs = Vec::with_capacity(stages.len());
        for (block, &n) in self.smooth.iter_mut().zip(&stages) {
            xs.push(block.forward(maps.stage(n), mode)?);
        }
        let (x_m, g, m) = match &mut self.interaction {
            Some(inter) => {
                let out = inter.forward(&xs)?;
                (Some(out.x_m), out.g, out.m)
            }
            None => (None, Vec::new(), xs.clone()),
        };
        let m_concat = match (&x_m, self.config.stage_num) {
            (Some(xm), 1) => concatenate(Axis(1), &[xs[0].view(), xm.view()]).expect("equal batch"),
            _ => {
                let views: Vec<_> = m.iter().map(|a| a.view()).collect();
                concatenate(Axis(1), &views).expect("equal batch")
            }
        };
        let mut stage_probs = BTreeMap::new();
        let mut concat_probs = None;
        let wanted = |h: HeadId| match heads {
            Heads::None => false,
            Heads::All => true,
            Heads::Only(x) => x == h,
        };
        for (i, &n) in stages.iter().enumerate() {
            if wanted(HeadId::Stage(n)) {
                stage_probs.insert(n, self.stage_heads[i].forward(&m[i], mode)?);
            }
        }
        if wanted(HeadId::Concat) {
            concat_probs = Some(self.concat_head.forward(&m_concat, mode)?);
        }
        Ok(ForwardOutput {
            x: xs,
            x_m,
            g,
            m,
            m_concat,
            stage_probs,
            concat_probs,
            maps,
        })
    }

    /// Backpropagates a gradient on one head's probabilities (or logits when
    /// `on_logits`) through everything that head depends on. Requires the
    /// preceding `forward` to have evaluated that head.
    pub fn backward(&mut self, head: HeadId, grad: &Array2<f64>, on_logits: bool) -> Result<BackwardOutput> {
        self.counters.backward_passes += 1;
        let stages = self.interacting_stages();
        let s_num = stages.len();
        let c = self.config.c;
        let mut dms: Vec<Option<Array2<f64>>> = vec![None; s_num];
        let mut dxm_direct = None;
        let mut dx_direct: Option<Array2<f64>> = None;
        match head {
            HeadId::Stage(n) => {
                let i = self.stage_slot(n)?;
                let h = &mut self.stage_heads[i];
                dms[i] = Some(if on_logits { h.backward_logits(grad) } else { h.backward(grad) });
            }
            HeadId::Concat => {
                let h = &mut self.concat_head;
                let dcat = if on_logits { h.backward_logits(grad) } else { h.backward(grad) };
                if self.interaction.is_some() && s_num == 1 {
                    dx_direct = Some(dcat.slice(s![.., 0..c]).to_owned());
                    dxm_direct = Some(dcat.slice(s![.., c..2 * c]).to_owned());
                } else {
                    for (i, dm) in dms.iter_mut().enumerate() {
                        *dm = Some(dcat.slice(s![.., i * c..(i + 1) * c]).to_owned());
                    }
                }
            }
        }
        let dxs: Vec<Option<Array2<f64>>> = match &mut self.interaction {
            Some(inter) => {
                let mut d = inter.backward(&dms, dxm_direct.as_ref());
                if let Some(dd) = dx_direct {
                    d[0] += &dd;
                }
                d.into_iter().map(Some).collect()
            }
            None => dms,
        };
        let mut map_grads: Vec<Option<Array4<f64>>> = vec![None; self.stages()];
        let mut smooth_used = Vec::new();
        for (i, dx) in dxs.iter().enumerate() {
            if let Some(dx) = dx {
                map_grads[stages[i] - 1] = Some(self.smooth[i].backward(dx));
                smooth_used.push(stages[i]);
            }
        }
        let backbone_depth = map_grads.iter().rposition(|g| g.is_some()).map_or(0, |i| i + 1);
        let stage_map_grads = backward_stages(&mut self.backbone, &self.partition, &map_grads);
        Ok(BackwardOutput {
            used: UsedParams {
                backbone_depth,
                smooth: smooth_used,
                mlp: self.interaction.is_some(),
                head,
            },
            stage_map_grads,
        })
    }

    /// Visits every tensor with its group.
    pub fn visit_grouped(&mut self, f: &mut dyn FnMut(ParamGroup, &str, Slot<'_>)) {
        for n in 1..=self.partition.stages() {
            for i in self.partition.layers(n) {
                self.backbone.layers[i].visit(&format!("backbone.layer{i}"), &mut |name, slot| {
                    f(ParamGroup::Backbone(n), name, slot)
                });
            }
        }
        let stages = self.interacting_stages();
        for (block, &n) in self.smooth.iter_mut().zip(&stages) {
            block.visit(&format!("smooth.s{n}"), &mut |name, slot| f(ParamGroup::Smooth(n), name, slot));
        }
        if let Some(inter) = &mut self.interaction {
            inter.visit("msi", &mut |name, slot| f(ParamGroup::Mlp, name, slot));
        }
        for (head, &n) in self.stage_heads.iter_mut().zip(&stages) {
            head.visit(&format!("head.s{n}"), &mut |name, slot| {
                f(ParamGroup::Head(HeadId::Stage(n)), name, slot)
            });
        }
        self.concat_head
            .visit("head.concat", &mut |name, slot| f(ParamGroup::Head(HeadId::Concat), name, slot));
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_grouped(&mut |_, _, slot| {
            if let Slot::Param(p) = slot {
                n += p.value.len();
            }
        });
        n
    }

    /// Eval-mode prediction bundles, one per image.
    pub fn predict(&mut self, images: &[&ImageTensor]) -> Result<Vec<PredictionBundle>> {
        let batch = self.batch(images)?;
        let out = self.forward(&batch, Mode::Eval, Heads::All)?;
        let concat = out.concat_probs.expect("all heads requested");
        Ok((0..images.len())
            .map(|b| PredictionBundle {
                y_hat: out.stage_probs.iter().map(|(&n, p)| (n, p.row(b).to_vec())).collect(),
                y_hat_concat: concat.row(b).to_vec(),
                m_concat: out.m_concat.row(b).to_vec(),
            })
            .collect())
    }
}

impl Module for Model {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.visit_grouped(&mut |_, name, slot| f(&join(prefix, name), slot));
    }
}

//! Run configuration: flat `section.key = value` text, layered as
//! defaults < file < flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::parse_bool;
use crate::data::{make_synthetic, scan_dataset, Dataset, DatasetManifest, Split, TransformMode, TransformSpec};
use crate::error::{Error, Result};
use crate::evalkit::CorruptionSpec;
use crate::model::{ModelConfig, Normalization};
use crate::trainer::{LrSchedule, TrainConfig, TrainingMechanisms};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "RMGPMSI_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root for `folder`, laid out as `root/<split>/<class>/<files>`.
    pub root: Option<PathBuf>,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            synthetic_classes: 4,
            synthetic_per_class: 8,
            synthetic_test_per_class: 0,
            synthetic_size: 64,
            synthetic_seed: 0,
        }
    }
}

/// Training data plus the held-out split, when there is one.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    /// Scanned manifests (folder datasets only).
    pub manifests: Vec<DatasetManifest>,
}

impl LoadedData {
    /// Held-out split if present, otherwise the training set.
    pub fn eval_set(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<LoadedData> {
        match self.source {
            DataSource::Synthetic => {
                let total = self.synthetic_per_class + self.synthetic_test_per_class;
                let all = make_synthetic(self.synthetic_classes, total, self.synthetic_size, self.synthetic_seed)?;
                if self.synthetic_test_per_class == 0 {
                    return Ok(LoadedData {
                        train: all,
                        test: None,
                        manifests: Vec::new(),
                    });
                }
                let (train, test) = all.split_per_class(self.synthetic_per_class);
                Ok(LoadedData {
                    train,
                    test: Some(test),
                    manifests: Vec::new(),
                })
            }
            DataSource::Folder => {
                let root = self
                    .root
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.source = folder needs data.root".into()))?;
                let train_manifest = scan_dataset(root, Split::Train)?;
                let mut manifests = vec![train_manifest.clone()];
                let test = if root.join(Split::Test.as_str()).is_dir() {
                    let m = scan_dataset(root, Split::Test)?;
                    if m.classes != train_manifest.classes {
                        return Err(Error::Config("train and test splits have different class lists".into()));
                    }
                    let d = Dataset::from_manifest(&m);
                    manifests.push(m);
                    Some(d)
                } else {
                    None
                };
                Ok(LoadedData {
                    train: Dataset::from_manifest(&train_manifest),
                    test,
                    manifests,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub jitter_coefficient: f64,
    pub noise_mean: f64,
    pub noise_amplitude: f64,
    pub corruption_seed: u64,
    /// Grad-CAM target; the predicted class when unset.
    pub target_class: Option<usize>,
    pub cam_format: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            jitter_coefficient: 1.0,
            noise_mean: 0.0,
            noise_amplitude: 5.0,
            corruption_seed: 0,
            target_class: None,
            cam_format: "png".into(),
        }
    }
}

impl EvalConfig {
    pub fn corruptions(&self) -> Vec<CorruptionSpec> {
        vec![
            CorruptionSpec::jitter(self.jitter_coefficient, self.corruption_seed),
            CorruptionSpec::noise(self.noise_mean, self.noise_amplitude, self.corruption_seed),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    /// Desk scale: TinyNet on 64×64 synthetic images, no crop jitter.
    /// The backbone is randomly initialized, so it is neither frozen nor
    /// trained at a reduced rate.
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr_pretrained: 0.02,
            lr_new: 0.02,
            weight_decay: 5e-4,
            momentum: 0.9,
            freeze_epochs: 0,
            stage_num: 3,
            seed: 0,
            schedule: LrSchedule::Cosine,
            mechanisms: TrainingMechanisms::default(),
            allow_deep_mosaic: false,
            transform: TransformSpec::desk(TransformMode::Train),
        };
        let model = ModelConfig {
            c: 64,
            mlp_hidden: 64,
            ..ModelConfig::default()
        };
        Self {
            model,
            train,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    parse_bool(value).ok_or_else(|| Error::Config(format!("{key}: expected a boolean, got `{value}`")))
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Sets one key. `seed` is shorthand for `train.seed`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "out" => self.out = PathBuf::from(value),
            "seed" | "train.seed" => t.seed = parse_num(key, value)?,
            "train.epochs" => t.epochs = parse_num(key, value)?,
            "train.batch_size" => t.batch_size = parse_num(key, value)?,
            "train.lr_pretrained" => t.lr_pretrained = parse_num(key, value)?,
            "train.lr_new" => t.lr_new = parse_num(key, value)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, value)?,
            "train.momentum" => t.momentum = parse_num(key, value)?,
            "train.freeze_epochs" => t.freeze_epochs = parse_num(key, value)?,
            "train.stage_num" => {
                t.stage_num = parse_num(key, value)?;
                m.stage_num = t.stage_num;
            }
            "train.schedule" => match value {
                "cosine" => t.schedule = LrSchedule::Cosine,
                _ => return Err(Error::Config(format!("{key}: unknown schedule `{value}`"))),
            },
            "train.progressive" => t.mechanisms.progressive = parse_flag(key, value)?,
            "train.mosaic" => t.mechanisms.mosaic = parse_flag(key, value)?,
            "rmg.allow_deep" => t.allow_deep_mosaic = parse_flag(key, value)?,
            "transform.resize_to" => t.transform.resize_to = parse_num(key, value)?,
            "transform.crop_to" => t.transform.crop_to = parse_num(key, value)?,
            "transform.flip_prob" => t.transform.flip_prob = parse_num(key, value)?,
            "msi.c" => m.c = parse_num(key, value)?,
            "msi.mlp_hidden" => m.mlp_hidden = parse_num(key, value)?,
            "msi.interaction" => m.interaction = parse_flag(key, value)?,
            "model.classes" => m.classes = parse_num(key, value)?,
            "model.init_seed" => m.init_seed = parse_num(key, value)?,
            "model.normalize" => {
                m.input_norm = match value {
                    "none" => None,
                    "imagenet" => Some(Normalization::IMAGENET),
                    _ => return Err(Error::Config(format!("{key}: expected none or imagenet, got `{value}`"))),
                }
            }
            "data.source" => {
                self.data.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "folder" => DataSource::Folder,
                    _ => return Err(Error::Config(format!("{key}: expected synthetic or folder, got `{value}`"))),
                }
            }
            "data.root" => self.data.root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.synthetic_classes" => self.data.synthetic_classes = parse_num(key, value)?,
            "data.synthetic_per_class" => self.data.synthetic_per_class = parse_num(key, value)?,
            "data.synthetic_test_per_class" => self.data.synthetic_test_per_class = parse_num(key, value)?,
            "data.synthetic_size" => self.data.synthetic_size = parse_num(key, value)?,
            "data.synthetic_seed" => self.data.synthetic_seed = parse_num(key, value)?,
            "eval.jitter_coefficient" => self.eval.jitter_coefficient = parse_num(key, value)?,
            "eval.noise_mean" => self.eval.noise_mean = parse_num(key, value)?,
            "eval.noise_amplitude" => self.eval.noise_amplitude = parse_num(key, value)?,
            "eval.corruption_seed" => self.eval.corruption_seed = parse_num(key, value)?,
            "eval.target_class" => {
                self.eval.target_class = if value.is_empty() || value == "predicted" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "eval.cam_format" => self.eval.cam_format = value.to_string(),
            _ => match key.strip_prefix("backbone.") {
                Some(k) => m.backbone.set(k, value)?,
                None => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "out = {}", self.out.display());
        s.push_str(&echo_text(&self.model, &self.train));
        let d = &self.data;
        let _ = writeln!(
            s,
            "data.source = {}",
            match d.source {
                DataSource::Synthetic => "synthetic",
                DataSource::Folder => "folder",
            }
        );
        let _ = writeln!(s, "data.root = {}", d.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        let _ = writeln!(s, "data.synthetic_classes = {}", d.synthetic_classes);
        let _ = writeln!(s, "data.synthetic_per_class = {}", d.synthetic_per_class);
        let _ = writeln!(s, "data.synthetic_test_per_class = {}", d.synthetic_test_per_class);
        let _ = writeln!(s, "data.synthetic_size = {}", d.synthetic_size);
        let _ = writeln!(s, "data.synthetic_seed = {}", d.synthetic_seed);
        let e = &self.eval;
        let _ = writeln!(s, "eval.jitter_coefficient = {}", e.jitter_coefficient);
        let _ = writeln!(s, "eval.noise_mean = {}", e.noise_mean);
        let _ = writeln!(s, "eval.noise_amplitude = {}", e.noise_amplitude);
        let _ = writeln!(s, "eval.corruption_seed = {}", e.corruption_seed);
        let _ = writeln!(
            s,
            "eval.target_class = {}",
            e.target_class.map_or_else(|| "predicted".to_string(), |t| t.to_string())
        );
        let _ = writeln!(s, "eval.cam_format = {}", e.cam_format);
        s
    }
}

/// The model and training keys, as embedded in checkpoints.
pub fn echo_text(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "train.epochs = {}", train.epochs);
    let _ = writeln!(s, "train.batch_size = {}", train.batch_size);
    let _ = writeln!(s, "train.lr_pretrained = {}", train.lr_pretrained);
    let _ = writeln!(s, "train.lr_new = {}", train.lr_new);
    let _ = writeln!(s, "train.weight_decay = {}", train.weight_decay);
    let _ = writeln!(s, "train.momentum = {}", train.momentum);
    let _ = writeln!(s, "train.freeze_epochs = {}", train.freeze_epochs);
    let _ = writeln!(s, "train.stage_num = {}", train.stage_num);
    let _ = writeln!(s, "train.seed = {}", train.seed);
    let _ = writeln!(s, "train.schedule = cosine");
    let _ = writeln!(s, "train.progressive = {}", train.mechanisms.progressive);
    let _ = writeln!(s, "train.mosaic = {}", train.mechanisms.mosaic);
    let _ = writeln!(s, "rmg.allow_deep = {}", train.allow_deep_mosaic);
    let _ = writeln!(s, "transform.resize_to = {}", train.transform.resize_to);
    let _ = writeln!(s, "transform.crop_to = {}", train.transform.crop_to);
    let _ = writeln!(s, "transform.flip_prob = {}", train.transform.flip_prob);
    let _ = writeln!(s, "msi.c = {}", model.c);
    let _ = writeln!(s, "msi.mlp_hidden = {}", model.mlp_hidden);
    let _ = writeln!(s, "msi.interaction = {}", model.interaction);
    let _ = writeln!(s, "model.classes = {}", model.classes);
    let _ = writeln!(s, "model.init_seed = {}", model.init_seed);
    let norm = match model.input_norm {
        None => "none",
        Some(n) if n == Normalization::IMAGENET => "imagenet",
        Some(_) => "custom",
    };
    let _ = writeln!(s, "model.normalize = {norm}");
    for line in model.backbone.to_text().lines() {
        let _ = writeln!(s, "backbone.{line}");
    }
    s
}

/// Inverse of [`echo_text`]. The model's StageNum follows `train.stage_num`.
pub fn parse_echo(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut cfg = RunConfig {
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        ..RunConfig::default()
    };
    cfg.apply_text(text)?;
    cfg.model.stage_num = cfg.train.stage_num;
    Ok((cfg.model, cfg.train))
}

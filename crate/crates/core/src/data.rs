//! Datasets: class-per-directory ingestion, train/eval transforms and a
//! seeded synthetic fine-grained dataset.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "bmp"];
const MANIFEST_HEADER: &str = "# rmgpmsi manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Listing of one split of a `root/<split>/<class>/<file>` tree. Sample
/// paths are relative to `root/<split>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub classes: Vec<String>,
    pub samples: Vec<(String, usize)>,
}

impl DatasetManifest {
    pub fn split_dir(&self) -> PathBuf {
        self.root.join(self.split.as_str())
    }

    /// Text form: a header, one `#class` line per class, then
    /// `class_index<TAB>relative_path` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n#split\t{}\n", self.split);
        for (i, name) in self.classes.iter().enumerate() {
            out.push_str(&format!("#class\t{i}\t{name}\n"));
        }
        for (path, label) in &self.samples {
            out.push_str(&format!("{label}\t{path}\n"));
        }
        out
    }

    pub fn from_text(root: &Path, text: &str) -> Result<Self> {
        let mut split = None;
        let mut classes = Vec::new();
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: &str| Error::ManifestParse {
                line: i + 1,
                reason: reason.to_string(),
            };
            if i == 0 {
                if line != MANIFEST_HEADER {
                    return Err(bad("missing header"));
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["#split", s] => split = Some(s.parse::<Split>()?),
                ["#class", idx, name] => {
                    if idx.parse::<usize>().ok() != Some(classes.len()) {
                        return Err(bad("class indices must be dense and ordered"));
                    }
                    classes.push(name.to_string());
                }
                [label, path] => {
                    let label: usize = label.parse().map_err(|_| bad("bad class index"))?;
                    if label >= classes.len() {
                        return Err(bad("class index out of range"));
                    }
                    samples.push((path.to_string(), label));
                }
                _ => return Err(bad("unrecognized line")),
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            split: split.ok_or_else(|| Error::ManifestParse {
                line: 2,
                reason: "missing #split".into(),
            })?,
            classes,
            samples,
        })
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Lists `root/<split>`: classes in lexicographic order, files sorted by
/// name within each class. Every image header is probed for readability.
pub fn scan_dataset(root: &Path, split: Split) -> Result<DatasetManifest> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(Error::MissingRoot(dir));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::NoClasses(dir));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    for (label, (name, path)) in class_dirs.into_iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(&path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("class `{name}` in {} has no images", dir.display());
        }
        for file in files {
            image::ImageReader::open(&file)
                .and_then(|r| r.with_guessed_format())
                .map_err(|e| e.to_string())
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()))
                .map_err(|reason| Error::UnreadableImage {
                    path: file.clone(),
                    reason,
                })?;
            let rel = format!("{}/{}", name, file.file_name().unwrap_or_default().to_string_lossy());
            samples.push((rel, label));
        }
        classes.push(name);
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        classes,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    /// Resize, random horizontal flip, random crop.
    Train,
    /// Resize, center crop.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub resize_to: usize,
    pub crop_to: usize,
    pub mode: TransformMode,
    pub flip_prob: f64,
}

impl TransformSpec {
    /// 512 → 448 preset for full-size backbones.
    pub fn full(mode: TransformMode) -> Self {
        Self {
            resize_to: 512,
            crop_to: 448,
            mode,
            flip_prob: 0.5,
        }
    }

    /// 64 → 64 desk-scale preset (no crop jitter).
    pub fn desk(mode: TransformMode) -> Self {
        Self {
            resize_to: 64,
            crop_to: 64,
            mode,
            flip_prob: 0.5,
        }
    }

    pub fn with_mode(mut self, mode: TransformMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, max_depth: u32) -> Result<()> {
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return Err(Error::Config(format!(
                "crop_to {} must be in 1..={}",
                self.crop_to, self.resize_to
            )));
        }
        if !self.crop_to.is_multiple_of(1 << max_depth) {
            return Err(Error::Config(format!(
                "crop_to {} is not divisible by 2^{max_depth}",
                self.crop_to
            )));
        }
        Ok(())
    }
}

/// Applies the train or eval pipeline; the output is `crop_to × crop_to`.
pub fn apply_transform<R: Rng + ?Sized>(image: &ImageTensor, spec: &TransformSpec, rng: &mut R) -> Result<ImageTensor> {
    let resized = image.resize(spec.resize_to, spec.resize_to)?;
    let slack = spec.resize_to - spec.crop_to;
    match spec.mode {
        TransformMode::Eval => resized.crop(slack / 2, slack / 2, spec.crop_to, spec.crop_to),
        TransformMode::Train => {
            let flipped = if rng.gen_bool(spec.flip_prob) {
                resized.flip_horizontal()
            } else {
                resized
            };
            let y = rng.gen_range(0..=slack);
            let x = rng.gen_range(0..=slack);
            flipped.crop(y, x, spec.crop_to, spec.crop_to)
        }
    }
}

#[derive(Debug, Clone)]
pub enum SampleSource {
    Memory(ImageTensor),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub source: SampleSource,
    pub label: usize,
}

impl Sample {
    pub fn load(&self) -> Result<ImageTensor> {
        match &self.source {
            SampleSource::Memory(img) => Ok(img.clone()),
            SampleSource::File(path) => ImageTensor::open(path),
        }
    }

    pub fn name(&self, index: usize) -> String {
        match &self.source {
            SampleSource::Memory(_) => format!("sample{index:04}"),
            SampleSource::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("sample{index:04}")),
        }
    }
}

/// Labeled samples; images stay on disk until requested.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let dir = manifest.split_dir();
        Self {
            classes: manifest.classes.clone(),
            samples: manifest
                .samples
                .iter()
                .map(|(rel, label)| Sample {
                    source: SampleSource::File(dir.join(rel)),
                    label: *label,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Deterministic per-class split: the first `train_per_class` samples of
    /// each class go to the first dataset, the rest to the second.
    pub fn split_per_class(&self, train_per_class: usize) -> (Dataset, Dataset) {
        let mut seen = vec![0usize; self.num_classes()];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for s in &self.samples {
            if seen[s.label] < train_per_class {
                a.push(s.clone());
            } else {
                b.push(s.clone());
            }
            seen[s.label] += 1;
        }
        (
            Dataset {
                classes: self.classes.clone(),
                samples: a,
            },
            Dataset {
                classes: self.classes.clone(),
                samples: b,
            },
        )
    }
}

/// 5×5 glyph bitmaps, left-right symmetric so horizontal flips keep the
/// class cue intact. Row-major, bit 4 is the leftmost column.
const GLYPHS: [[u8; 5]; 12] = [
    [0b00100, 0b01110, 0b11111, 0b01110, 0b00100],
    [0b10001, 0b01010, 0b00100, 0b01010, 0b10001],
    [0b11111, 0b10001, 0b10001, 0b10001, 0b11111],
    [0b00100, 0b00100, 0b11111, 0b00100, 0b00100],
    [0b11111, 0b00000, 0b11111, 0b00000, 0b11111],
    [0b10101, 0b10101, 0b10101, 0b10101, 0b10101],
    [0b01110, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b00000, 0b01110, 0b01110, 0b01110, 0b00000],
    [0b10001, 0b10001, 0b11111, 0b10001, 0b10001],
    [0b00100, 0b01010, 0b10001, 0b01010, 0b00100],
    [0b11011, 0b11011, 0b00000, 0b11011, 0b11011],
    [0b01010, 0b11111, 0b01010, 0b11111, 0b01010],
];

pub const SYNTHETIC_MAX_CLASSES: usize = GLYPHS.len();

const GLYPH_COPIES: usize = 3;

/// Synthetic fine-grained dataset. Every image shares the same global
/// layout (a shaded background and a large ellipse "body" with jittered
/// position and color); the class lives only in small glyphs stamped at
/// random positions on the body. Samples are ordered class by class.
pub fn make_synthetic(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SYNTHETIC_MAX_CLASSES).contains(&classes) {
        return Err(Error::BadSize(format!("classes must be in 2..={SYNTHETIC_MAX_CLASSES}, got {classes}")));
    }
    if size < 16 || !size.is_multiple_of(8) {
        return Err(Error::BadSize(format!("size {size} must be a multiple of 8 and at least 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(classes * per_class);
    for label in 0..classes {
        for _ in 0..per_class {
            samples.push(Sample {
                source: SampleSource::Memory(synthetic_image(label, size, &mut rng)),
                label,
            });
        }
    }
    Ok(Dataset {
        classes: (0..classes).map(|k| format!("class{k}")).collect(),
        samples,
    })
}

fn synthetic_image(label: usize, size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let s = size as f32;
    let bg = [rng.gen_range(0.55..0.7f32), rng.gen_range(0.6..0.75f32), rng.gen_range(0.65..0.8f32)];
    let body = [rng.gen_range(0.35..0.5f32), rng.gen_range(0.3..0.45f32), rng.gen_range(0.2..0.35f32)];
    let (cx, cy) = (s * rng.gen_range(0.42..0.58f32), s * rng.gen_range(0.42..0.58f32));
    let (rx, ry) = (s * rng.gen_range(0.32..0.4f32), s * rng.gen_range(0.26..0.34f32));
    let mut img = ImageTensor::from_fn(size, size, 3, ValueRange::UnitFloat, |y, x, c| {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
        let shade = 0.1 * (fy / s - 0.5);
        if d <= 1.0 {
            body[c] + shade * 0.5
        } else {
            bg[c] - shade
        }
    });
    let glyph = &GLYPHS[label];
    let ink = [rng.gen_range(0.85..0.95f32), rng.gen_range(0.85..0.95f32), rng.gen_range(0.8..0.9f32)];
    let cell = (size / 32).max(1);
    let side = (5 * cell) as f32;
    for _ in 0..GLYPH_COPIES {
        let gx = (cx + rng.gen_range(-0.55..0.55f32) * rx - side / 2.0).clamp(0.0, s - side) as usize;
        let gy = (cy + rng.gen_range(-0.55..0.55f32) * ry - side / 2.0).clamp(0.0, s - side) as usize;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) == 0 {
                    continue;
                }
                for (dy, dx) in (0..cell).flat_map(|dy| (0..cell).map(move |dx| (dy, dx))) {
                    for (c, &v) in ink.iter().enumerate() {
                        img.set(gy + row * cell + dy, gx + col * cell + dx, c, v);
                    }
                }
            }
        }
    }
    for v in img.values_mut() {
        *v = (*v + rng.gen_range(-0.03..0.03f32)).clamp(0.0, 1.0);
    }
    img
}

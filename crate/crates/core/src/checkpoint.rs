//! Single-file binary checkpoints.
//!
//! Layout (little endian): magic, format version, config echo, completed
//! epochs, optimizer hyperparameters and step count, generator state, metrics
//! CSV, then named tensors (parameters, buffers, momentum slots), closed by an
//! FNV-1a checksum of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{echo_text, parse_echo, parse_pairs};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Module, Slot};
use crate::optim::Sgd;
use crate::trainer::{MetricsLog, TrainConfig};

pub const MAGIC: &[u8; 8] = b"RMGPCKPT";
pub const VERSION: u32 = 1;

const TAG_PARAM: u8 = 0;
const TAG_BUFFER: u8 = 1;
const TAG_MOMENTUM: u8 = 2;

/// Exact position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub optimizer: Sgd,
    pub rng: RngState,
    pub epochs_completed: usize,
    pub metrics: MetricsLog,
}

impl Checkpoint {
    pub fn model_config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Fails with `ResumeMismatch` naming every differing key.
    pub fn check_compatible(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        let ours = parse_pairs(&echo_text(self.model.config(), &self.train))?;
        let theirs: BTreeMap<String, String> = parse_pairs(&echo_text(model, train))?.into_iter().collect();
        let diffs: Vec<String> = ours
            .iter()
            .filter(|(k, v)| theirs.get(k) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, run {}", theirs.get(k).map_or("<unset>", |s| s)))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ResumeMismatch(diffs.join("; ")))
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, tag: u8, name: &str, t: &ArrayD<f64>) {
        self.u8(tag);
        self.bytes(name.as_bytes());
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.iter() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::CorruptCheckpoint(what.to_string())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(usize::try_from(n).map_err(|_| corrupt("length"))?)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
    fn tensor(&mut self) -> Result<(u8, String, ArrayD<f64>)> {
        let tag = self.u8()?;
        let name = self.string()?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(corrupt("tensor rank"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(self.u64()?).map_err(|_| corrupt("dimension"))?);
        }
        let len: usize = shape.iter().product();
        if len.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(corrupt("tensor size"));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| corrupt("tensor shape"))?;
        Ok((tag, name, t))
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(echo_text(ckpt.model.config(), &ckpt.train).as_bytes());
    w.u64(ckpt.epochs_completed as u64);
    w.f64(ckpt.optimizer.momentum);
    w.f64(ckpt.optimizer.weight_decay);
    w.u64(ckpt.optimizer.steps as u64);
    w.0.extend_from_slice(&ckpt.rng.seed);
    w.u64(ckpt.rng.stream);
    w.0.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    w.bytes(ckpt.metrics.to_csv().as_bytes());

    let mut tensors: Vec<(u8, String, ArrayD<f64>)> = Vec::new();
    let mut model = ckpt.model.clone();
    model.visit("", &mut |name, slot| match slot {
        Slot::Param(p) => tensors.push((TAG_PARAM, name.to_string(), p.value.clone())),
        Slot::Buffer(b) => tensors.push((TAG_BUFFER, name.to_string(), b.clone())),
    });
    for (name, buf) in &ckpt.optimizer.buffers {
        tensors.push((TAG_MOMENTUM, name.clone(), buf.clone()));
    }
    w.u64(tensors.len() as u64);
    for (tag, name, t) in &tensors {
        w.tensor(*tag, name, t);
    }
    let sum = fnv1a(&w.0);
    w.u64(sum);
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let echo = r.string()?;
    let (model_config, train) = parse_echo(&echo).map_err(|e| Error::CorruptCheckpoint(format!("config echo: {e}")))?;
    let epochs_completed = r.u64()? as usize;
    let momentum = r.f64()?;
    let weight_decay = r.f64()?;
    let steps = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let metrics = MetricsLog::parse(&r.string()?)?;

    let count = r.u64()?;
    let mut values: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for _ in 0..count {
        let (tag, name, t) = r.tensor()?;
        match tag {
            TAG_PARAM | TAG_BUFFER => {
                values.insert(name, t);
            }
            TAG_MOMENTUM => {
                buffers.insert(name, t);
            }
            _ => return Err(corrupt("unknown tensor tag")),
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }

    let mut model = Model::new(model_config).map_err(|e| Error::CorruptCheckpoint(format!("model: {e}")))?;
    let mut problem = None;
    let mut seen = 0usize;
    model.visit("", &mut |name, slot| {
        let target = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        match values.get(name) {
            Some(v) if v.shape() == target.shape() => {
                target.assign(v);
                seen += 1;
            }
            Some(_) => problem = Some(format!("shape of {name}")),
            None => problem = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::CorruptCheckpoint(p));
    }
    if seen != values.len() {
        return Err(corrupt("unexpected tensors"));
    }
    Ok(Checkpoint {
        model,
        train,
        optimizer: Sgd {
            momentum,
            weight_decay,
            buffers,
            steps,
        },
        rng: RngState { seed, stream, word_pos },
        epochs_completed,
        metrics,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(ckpt))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

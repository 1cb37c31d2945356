use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("region {w}x{h} at ({x},{y}) has an odd side")]
    OddRegion { x: usize, y: usize, w: usize, h: usize },
    #[error("region {w}x{h} at ({x},{y}) lies outside a {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("image {width}x{height} is not divisible by 2^{depth}")]
    IndivisibleImage { width: usize, height: usize, depth: u32 },
    #[error("recursion depth {0} exceeds 3; set the override flag to allow it")]
    RecursionLimit(u32),
    #[error("trace is incompatible with the image: {0}")]
    IncompatibleTrace(String),
    #[error("malformed trace record at line {line}: {reason}")]
    TraceParse { line: usize, reason: String },

    #[error("layer channel profile is empty")]
    EmptyProfile,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("expected {expected} stage vectors, got {actual}")]
    ArityMismatch { expected: usize, actual: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("stage {0} is not in the interacting set")]
    UnknownStage(usize),
    #[error("invalid StageNum {stage_num} for a backbone with N = {stages} stages")]
    InvalidStageNum { stage_num: usize, stages: usize },

    #[error("non-finite loss {loss} in phase {phase} (epoch {epoch}, batch {batch})")]
    NonFiniteLoss {
        loss: f64,
        phase: usize,
        epoch: usize,
        batch: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("checkpoint does not match the run configuration: {0}")]
    ResumeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unknown corruption kind `{0}`")]
    UnknownKind(String),

    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("no class directories under {0}")]
    NoClasses(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("cannot decode image: {0}")]
    DecodeError(String),
    #[error("bad synthetic dataset parameters: {0}")]
    BadSize(String),
    #[error("malformed manifest at line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid ablation combination: {0}")]
    InvalidCombo(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

/// Broad failure class, used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid configuration, arguments or incompatible artifacts.
    Config,
    /// Missing, unreadable or malformed data.
    Data,
    /// Training diverged.
    Divergence,
    /// Everything else: shape contracts, I/O.
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | InvalidCombo(_) | InvalidStageNum { .. } | RecursionLimit(_) | ResumeMismatch(_)
            | UnknownKind(_) | UnknownStage(_) | EmptyProfile | VersionMismatch { .. } => ErrorClass::Config,
            MissingRoot(_) | NoClasses(_) | UnreadableImage { .. } | DecodeError(_) | BadSize(_)
            | ManifestParse { .. } | DatasetEmpty | CorruptCheckpoint(_) | IndivisibleImage { .. }
            | IncompatibleTrace(_) | TraceParse { .. } | Image(_) => ErrorClass::Data,
            NonFiniteLoss { .. } => ErrorClass::Divergence,
            _ => ErrorClass::Other,
        }
    }

    /// 2 for configuration errors, 3 for data errors, 4 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Divergence => 4,
            ErrorClass::Other => 1,
        }
    }
}

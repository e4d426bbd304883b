//! Structured error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: shape mismatch, {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("conv2d: input has {input} channels but kernel expects {kernel} (input {input_shape:?}, kernel {kernel_shape:?})")]
    ChannelMismatch {
        input: usize,
        kernel: usize,
        input_shape: Vec<usize>,
        kernel_shape: Vec<usize>,
    },

    #[error("{context}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        context: String,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("matmul: inner dimensions differ, {left:?} x {right:?}")]
    MatmulDimMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("pixel_shuffle: {channels} channels not divisible by {factor}^2")]
    PixelShuffleChannels { channels: usize, factor: usize },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("tape: value created on a different tape (or after a reset); record all inputs on the tape used for backward")]
    ForeignValue,

    #[error("lora rank {rank} exceeds min(c_out, c_in*kh*kw) = min({c_out}, {flat_in}) for this kernel")]
    RankTooLarge {
        rank: usize,
        c_out: usize,
        flat_in: usize,
    },

    #[error("lora plan names unknown layer \"{name}\"; valid layers: {valid:?}")]
    PlanUnknownLayer { name: String, valid: Vec<String> },

    #[error("checkpoint is missing tensor \"{name}\"")]
    MissingTensor { name: String },

    #[error("tensor \"{name}\": expected shape {expected:?}, checkpoint has {got:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint format: {reason}")]
    CheckpointFormat { reason: String },

    #[error("config key \"{key}\": {reason}")]
    Config { key: String, reason: String },

    #[error("unknown config key \"{key}\"")]
    UnknownConfigKey { key: String },

    #[error("image \"{path}\": {reason}")]
    Image { path: String, reason: String },

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },

    #[error("dataset \"{dir}\": {reason}")]
    Dataset { dir: String, reason: String },

    #[error("ssim needs at least {min}x{min} pixels after cropping, got {height}x{width}")]
    ImageTooSmall {
        min: usize,
        height: usize,
        width: usize,
    },

    #[error("gradient produced for frozen tensor \"{name}\"")]
    FrozenGradient { name: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to: 1 for usage/config mistakes,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::UnknownConfigKey { .. } => 1,
            _ => 2,
        }
    }
}

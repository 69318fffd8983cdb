use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch { context: &'static str, expected: String, got: String },

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("wrong keypoint kind in {context}")]
    InvalidKind { context: &'static str },

    #[error("audio error: {0}")]
    Audio(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config fingerprint mismatch: checkpoint has {got}, expected {expected}")]
    FingerprintMismatch { expected: String, got: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("training aborted at step {step}: {message}")]
    Train { step: usize, message: String },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("split contamination: seed {0} appears in both train and eval sets")]
    SplitContamination(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

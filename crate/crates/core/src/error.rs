use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid camera transform: {0}")]
    InvalidTransform(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid routing rate {0}, expected a value in [0, 1]")]
    InvalidRate(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid guidance: {0}")]
    InvalidGuidance(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDivergence { step: u64, loss: f64 },

    #[error("sampler diverged at step {step} (t = {t})")]
    SamplerDivergence { step: usize, t: f64 },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

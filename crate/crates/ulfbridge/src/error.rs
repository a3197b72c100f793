//! Error type shared across the crate, with stable CLI exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("step index {k} is past the final bridge step {last}")]
    StepPastEnd { k: usize, last: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("noise level {tau} outside [0, {max}]")]
    InvalidLevel { tau: usize, max: usize },
    #[error("score undefined at noise level 0 (zero noise coefficient)")]
    UndefinedScore,
    #[error("empty batch")]
    EmptyBatch,
    #[error("teacher data must come from the clean target pool only: {0}")]
    ContaminatedTeacherData(String),
    #[error("model is frozen; parameter updates are not allowed")]
    FrozenModel,
    #[error("teacher and critic use different noise schedules")]
    ScheduleMismatch,
    #[error("real and fake batches were diffused at different noise levels")]
    LevelMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("requested {requested} patches but only {available} positions exist")]
    TooManyPatches { requested: usize, available: usize },
    #[error("contrastive loss needs at least 2 patches")]
    NeedNegatives,
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("cohorts share subject ids: {0}")]
    SplitLeakage(String),
    #[error("invalid mixture model: {0}")]
    InvalidModel(String),
    #[error("need at least 2 samples per side, got {a} and {b}")]
    NeedSamples { a: usize, b: usize },
    #[error("cohort is missing required data: {0}")]
    IncompleteCohort(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    IncompatibleCheckpoint { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("NaN detected in {loss} at step {step}; last good checkpoint: {last_good}")]
    NaNDetected {
        loss: String,
        step: u64,
        last_good: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code: 0 ok, 2 usage, 3 i/o, 4 data contract,
    /// 5 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSchedule(_)
            | Error::InvalidConfig(_)
            | Error::InvalidLevel { .. }
            | Error::TooManyPatches { .. }
            | Error::NeedNegatives
            | Error::TooSmall(_)
            | Error::InvalidModel(_) => 2,
            Error::Io(_) | Error::Json(_) | Error::CorruptCheckpoint(_) => 3,
            Error::ContaminatedTeacherData(_)
            | Error::SplitLeakage(_)
            | Error::IncompleteCohort(_)
            | Error::EmptyBatch
            | Error::NeedSamples { .. }
            | Error::Shape(_)
            | Error::ScheduleMismatch
            | Error::LevelMismatch
            | Error::FrozenModel
            | Error::StepPastEnd { .. }
            | Error::IncompatibleCheckpoint { .. } => 4,
            Error::Numerical(_) | Error::NaNDetected { .. } | Error::UndefinedScore => 5,
        }
    }
}

use std::path::Path;

use davam::evalgen::EvalError;
use davam::models::ModelError;
use davam::train::{CheckpointError, TrainError};
use davam::corpus::CorpusError;
use thiserror::Error;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 1,
    Data = 2,
    Numeric = 3,
    Stage = 4,
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Config, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(ExitKind::Data, format!("i/o error on {}: {e}", path.display()))
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

fn model_kind(e: &ModelError) -> ExitKind {
    match e {
        ModelError::State(_) => ExitKind::Stage,
        ModelError::Contract(_) => ExitKind::Data,
        _ => ExitKind::Numeric,
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match e {
            CorpusError::Config(_) => ExitKind::Config,
            _ => ExitKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let kind = match e {
            CheckpointError::KindMismatch { .. } => ExitKind::Stage,
            _ => ExitKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::config(e.to_string()),
            TrainError::Corpus(c) => c.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Model(ref m) => Self::new(model_kind(m), e.to_string()),
            TrainError::NonFinite { .. } => Self::new(ExitKind::Numeric, e.to_string()),
            TrainError::Io { .. } => Self::new(ExitKind::Data, e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => Self::config(e.to_string()),
            EvalError::Contract(_) => Self::new(ExitKind::Data, e.to_string()),
            EvalError::State(_) => Self::new(ExitKind::Stage, e.to_string()),
            EvalError::Model(ref m) => Self::new(model_kind(m), e.to_string()),
            EvalError::Corpus(c) => c.into(),
            EvalError::Train(t) => t.into(),
        }
    }
}

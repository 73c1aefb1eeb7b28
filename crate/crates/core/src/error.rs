// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AresError>;

#[derive(Debug, Error)]
pub enum AresError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("virtual outlier underflow: needed {needed}, only {available} candidates qualify (deficit {})", needed - available)]
    SynthesisUnderflow { needed: usize, available: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<AresError>,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}; last good checkpoint: {}", checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<not saved>".into()))]
    DivergenceAbort {
        epoch: usize,
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AresError {
    pub fn invalid_param(msg: impl Into<String>) -> Self {
        Self::InvalidParameter(msg.into())
    }

    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Wraps the error with a human-readable location (epoch, batch, file...).
    pub fn context(self, context: impl Into<String>) -> Self {
        Self::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &AresError {
        match self {
            Self::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

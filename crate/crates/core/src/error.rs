use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "degenerate init statistics for weight layer {layer}: second moment {second_moment} is below squared mean {mean_sq}"
    )]
    DegenerateInit {
        layer: usize,
        second_moment: f64,
        mean_sq: f64,
    },

    #[error("undefined correlation: {0} has zero variance over the integration interval")]
    UndefinedCorrelation(&'static str),

    #[error("missing feedback matrix for layer {0}")]
    MissingFeedback(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient in weight layer {layer} at step {step}")]
    NonFiniteGradient { layer: usize, step: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {message} (byte offset {offset})")]
    Idx {
        path: PathBuf,
        message: String,
        offset: u64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn ensure_finite<T: num_traits::Float>(context: &'static str, xs: &[T]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(index) => Err(Error::NonFinite { context, index }),
    }
}

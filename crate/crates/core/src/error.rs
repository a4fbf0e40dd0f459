use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::zoo::SpecViolation;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("variable does not belong to this tape")]
    DetachedTape,

    #[error("operation `{0}` is not differentiable")]
    NotDifferentiable(&'static str),

    #[error("invalid architecture: {0}")]
    Spec(#[from] SpecViolation),

    #[error("budget of {budget} FLOPs is below the smallest {family} design ({minimum} FLOPs)")]
    UnreachableBudget {
        family: &'static str,
        budget: u64,
        minimum: u64,
    },

    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientClass {
        class: u32,
        available: usize,
        requested: usize,
    },

    #[error("empty dataset split")]
    EmptySplit,

    #[error("no epoch count known for {0} samples per class; pass an explicit override")]
    UnknownEpochs(usize),

    #[error("target is not a one-hot vector: {0}")]
    InvalidTarget(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("ensemble member {member}: {source}")]
    Member { member: usize, source: Box<Error> },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

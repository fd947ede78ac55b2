use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected shape {expected}, found {found}")]
    ShapeMismatch { context: &'static str, expected: Shape, found: Shape },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("ground truth has no foreground pixels; metric undefined")]
    EmptyForeground,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter shape mismatch: {}", .0.join(", "))]
    ParameterShapes(Vec<String>),
    #[error("missing parameters: {}", .0.join(", "))]
    MissingParameters(Vec<String>),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
}

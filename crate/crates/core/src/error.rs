use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {context}: {message}")]
    Shape { context: String, message: String },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{kind} layer has no pooling indices; run a traced forward pass first")]
    MissingPoolIndices { kind: &'static str },

    #[error("operation not supported for {kind} layer: {op}")]
    Unsupported { kind: &'static str, op: &'static str },

    #[error("mask must be binary (0/1), found {0}")]
    NonBinaryMask(f32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model composition error between layer {first} and layer {second}: {message}")]
    Composition {
        first: usize,
        second: usize,
        message: String,
    },

    #[error("manifest error at {field}: {message}")]
    Manifest { field: String, message: String },

    #[error("blob {path}: {message}")]
    Blob { path: PathBuf, message: String },

    #[error("invalid tensor file: {0}")]
    TensorFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("class index {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error("degenerate contribution map: {0}")]
    DegenerateMap(String),

    #[error("degenerate sections: {0}")]
    SectionDegenerate(String),

    #[error("no activated neurons at layer input; uniform shift undefined")]
    DeadLayer,

    #[error("at layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training failed: {message} (loss curve: {losses:?})")]
    TrainingFailure { message: String, losses: Vec<f64> },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numeric,
}

impl Error {
    pub fn shape(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_layer(self, layer: usize) -> Self {
        match self {
            e @ Error::AtLayer { .. } => e,
            e => Error::AtLayer {
                layer,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping layer context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtLayer { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self.root() {
            Error::Io { .. }
            | Error::Blob { .. }
            | Error::Manifest { .. }
            | Error::TensorFormat(_)
            | Error::Image { .. } => ErrorClass::Io,
            Error::NonFinite(_)
            | Error::DegenerateMap(_)
            | Error::SectionDegenerate(_)
            | Error::DeadLayer
            | Error::TrainingFailure { .. }
            | Error::UndefinedRatio(_) => ErrorClass::Numeric,
            _ => ErrorClass::Validation,
        }
    }
}

use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("source class {index} appears in more than one super-class")]
    DuplicateSource { index: usize },

    #[error("source class {index} is not covered by any super-class")]
    MissingSource { index: usize },

    #[error("remap table schema error: {0}")]
    Schema(String),

    #[error("label value {value} is not covered by the remap table")]
    UnmappedClass { value: usize },

    #[error("label value {value} out of range for {num_classes} classes")]
    LabelOutOfRange { value: usize, num_classes: usize },

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("layer index {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("requested {k} components from {dim}-dimensional samples")]
    TooManyComponents { k: usize, dim: usize },

    #[error("no direction for class {class}, layer {layer}")]
    UnknownDirection { class: usize, layer: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),
}

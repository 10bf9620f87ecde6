use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// The input does not match what the classifier accepts.
    #[error("input spec mismatch: {0}")]
    InputSpec(String),
    /// A value failed validation (non-finite data, bad parameter, ...).
    #[error("validation failed: {0}")]
    Validation(String),
    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// The layer is not in the classifier's registry.
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("class index {index} out of range for {num_classes} classes")]
    ClassIndex { index: usize, num_classes: usize },
    /// CAM methods require a frozen (inference-mode) classifier.
    #[error("classifier is in training mode; CAM requires inference mode")]
    TrainingMode,
    /// A caller-side precondition of a loss or schedule is violated.
    #[error("contract violated: {0}")]
    Contract(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
    /// A named parameter tensor required by an architecture is absent.
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;

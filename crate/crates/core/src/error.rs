use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error(
        "layer {site} is not isomorphic to the group signature: {field} is {found}, expected {expected}"
    )]
    Isomorphism {
        site: usize,
        field: &'static str,
        expected: String,
        found: String,
    },

    #[error("batch normalization parameters cannot be shared (layer {site})")]
    SharedBatchNorm { site: usize },

    #[error("invalid sharing plan: {0}")]
    InvalidPlan(String),

    #[error("parameter {name}: missing gradient for layer {site}")]
    MissingGradient { name: String, site: usize },

    #[error("parameter {name} never received a gradient")]
    UntouchedParameter { name: String },

    #[error("parameter {name} has a non-finite gradient at element {index}")]
    NonFiniteGradient { name: String, index: usize },

    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

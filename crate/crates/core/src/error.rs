use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("directory does not exist: {0}")]
    MissingDirectory(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("no eligible positive for patient {patient_id} in {mode} mode: {hint}")]
    NoEligiblePositive {
        patient_id: String,
        mode: &'static str,
        hint: &'static str,
    },

    #[error("ROI extraction failed: {0}")]
    RoiFailed(String),

    #[error("ROI mask is empty")]
    EmptyRoi,

    #[error("gabor kernel for wavelength {wavelength} px is {size} px wide, image is {height}x{width}")]
    KernelTooLarge {
        wavelength: f64,
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("perturbation left the image unchanged in {0} consecutive draws; check the perturbation ranges")]
    NoOpPerturbation(usize),

    #[error("threshold fitting requires both classes")]
    SingleClass,

    #[error("no anchor in the batch produced a usable triplet")]
    EmptyBatch,

    #[error("non-finite loss at step {step}; last finite breakdown: {last}")]
    NonFinite { step: u64, last: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

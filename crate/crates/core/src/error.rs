use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MesaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("degenerate trajectory: camera baseline is zero, view synthesis needs parallax")]
    DegenerateTrajectory,

    #[error("NoMaskedPixels: mask selects no pixels")]
    NoMaskedPixels,

    #[error("NoValidPoints: no pixel projects inside the source view")]
    NoValidPoints,

    #[error("DegenerateActivations: {0} has zero centered norm")]
    DegenerateActivations(String),

    #[error("sample manifests differ between activation sets")]
    ManifestMismatch,

    #[error("unknown probe `{name}`; available: {}", available.join(", "))]
    MissingProbe { name: String, available: Vec<String> },

    #[error("config fingerprint mismatch: checkpoint {found}, current {expected} (use --force to override)")]
    FingerprintMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in stage {stage} at step {step}: {detail}")]
    NonFiniteLoss { stage: String, step: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl MesaError {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            MesaError::InvalidInput(_) => "invalid_input",
            MesaError::Shape(_) => "shape",
            MesaError::Invariant(_) => "invariant",
            MesaError::DegenerateTrajectory => "degenerate_trajectory",
            MesaError::NoMaskedPixels => "no_masked_pixels",
            MesaError::NoValidPoints => "no_valid_points",
            MesaError::DegenerateActivations(_) => "degenerate_activations",
            MesaError::ManifestMismatch => "manifest_mismatch",
            MesaError::MissingProbe { .. } => "missing_probe",
            MesaError::FingerprintMismatch { .. } => "fingerprint_mismatch",
            MesaError::Checkpoint(_) => "checkpoint",
            MesaError::NonFiniteLoss { .. } => "non_finite_loss",
            MesaError::Config(_) => "config",
            MesaError::Pipeline(_) => "pipeline",
            MesaError::Io { .. } => "io",
            MesaError::Json(_) => "json",
            MesaError::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, MesaError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| MesaError::Io { path: path.into(), source })
    }
}

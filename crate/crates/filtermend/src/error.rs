use thiserror::Error;

/// Errors produced by the filter-analysis and reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    DimMismatch {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty sample set: {0}")]
    EmptySamples(&'static str),

    #[error("histogram bin edges must be strictly ascending")]
    BadBinEdges,

    #[error("histograms have different bin edges and cannot be compared")]
    EdgesMismatch,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("sample matrix rows are not in canonical image-major order")]
    BadProvenance,

    #[error("need at least {needed} samples per domain, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("design matrix is rank deficient; collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("filter unreconstructable at this grid: every active set is empty")]
    EmptyPath,

    #[error("no reconstruction basis: every filter was marked bad")]
    NoReconstructionBasis,

    #[error("layer index {0} out of range (network has {1} convolution layers)")]
    LayerOutOfRange(usize, usize),

    #[error("training diverged (loss is not finite); try a smaller learning rate")]
    TrainingDiverged,

    #[error("unknown shift kind: {0}")]
    UnknownShift(String),

    #[error("bad magic in {path}: expected {expected:?}, got {actual:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        actual: [u8; 4],
    },

    #[error("unsupported format version {got} in {path} (expected {expected})")]
    BadVersion {
        path: String,
        expected: u16,
        got: u16,
    },

    #[error("corrupt or truncated file {path}: {detail}")]
    Corrupt { path: String, detail: String },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("bad config entry `{0}`")]
    BadConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by tensor conversion, kernels, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} exceeds magnitude bound {bound}")]
    ValueOutOfRange { value: u32, bound: u32 },

    #[error("slice index {index} out of range 1..={max}")]
    SliceOutOfRange { index: usize, max: usize },

    #[error("pruning all {0} bit slices would leave an empty input")]
    EmptyPrune(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("missing parameters for layer {0}")]
    MissingParams(usize),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("scaled depth {depth} not divisible by {n}; round depths to a multiple of {n} or disable strict mode")]
    NonIntegralDepth { depth: usize, n: usize },

    #[error("{classes} classes exceed the information capacity of the significant bit slices")]
    ClassCapacity { classes: usize },

    #[error("malformed data at byte offset {offset}: {reason}")]
    MalformedData { offset: u64, reason: String },

    #[error("malformed config: {0}")]
    MalformedConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

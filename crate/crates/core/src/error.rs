use thiserror::Error;

#[derive(Debug, Error)]
pub enum VillmError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("sequence of {total} positions exceeds max_seq_len {budget} ({breakdown})")]
    Length {
        total: usize,
        budget: usize,
        breakdown: String,
    },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label mismatch: expected {expected}, found {found}")]
    LabelMismatch { expected: String, found: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, VillmError>;

pub(crate) trait IoContext<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| VillmError::Io {
            context: context(),
            source,
        })
    }
}

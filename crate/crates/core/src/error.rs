use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("class index {index} out of range for {classes} classes")]
    Index { index: usize, classes: usize },

    #[error("filter {0} has zero l1 norm")]
    DegenerateFilter(usize),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("tape state: {0}")]
    State(&'static str),

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("incompatible checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

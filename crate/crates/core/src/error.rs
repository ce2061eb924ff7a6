use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("topology error at joint '{joint}': {reason}")]
    Topology { joint: String, reason: String },

    #[error("degenerate rest frame at joint '{0}': reference and fallback are collinear with the bone")]
    DegenerateFrame(String),

    #[error("degenerate 6D rotation input")]
    Degenerate6d,

    #[error("degenerate configuration: {0}")]
    DegenerateConfig(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown joint name '{0}'")]
    UnknownJoint(String),

    #[error("rig mismatch: {0}")]
    RigMismatch(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Parse(e.to_string())
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Format(format!("{other:?}")),
            }
        } else {
            Error::Format(e.to_string())
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn topology(joint: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Topology { joint: joint.into(), reason: reason.into() }
    }

    /// True for failures of the filesystem or stream layer, as opposed to
    /// validation of content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

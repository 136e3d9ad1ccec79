use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("invalid layer: {0}")]
    InvalidLayer(String),

    #[error("invalid bounding box {0:?}: width and height must be at least 1")]
    InvalidBBox((i32, i32, u32, u32)),

    #[error("invalid canvas: {0}")]
    InvalidCanvas(String),

    #[error("layer {index} does not match its slot: {reason}")]
    Alignment { index: usize, reason: String },

    #[error("decode error in field `{field}`: {reason}")]
    Decode { field: String, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("missing aesthetic score for sample `{0}`")]
    MissingScore(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("undefined region: {0}")]
    UndefinedRegion(&'static str),

    #[error("quality reject: {0}")]
    QualityReject(String),

    #[error("sample `{sample}` failed on slots {}", format_slots(.failures))]
    SampleFailed {
        sample: String,
        failures: Vec<(usize, String)>,
    },

    #[error("transport error talking to {role} backend: {message}")]
    Transport { role: String, message: String },

    #[error("{role} backend returned status {status}: {body}")]
    Backend {
        role: String,
        status: u16,
        body: String,
    },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("unknown sample ids: {}", .0.join(", "))]
    UnknownSamples(Vec<String>),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error: {0}")]
    Png(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_slots(failures: &[(usize, String)]) -> String {
    failures
        .iter()
        .map(|(i, why)| format!("#{i} ({why})"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Decode {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Whether retrying the same request may succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            Error::Transport { .. } | Error::QualityReject(_) => true,
            Error::Backend { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

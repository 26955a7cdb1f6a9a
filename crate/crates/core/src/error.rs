use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dictionary preset `{0}`")]
    UnknownPreset(String),
    #[error("duplicate dictionary entry at position {0}")]
    DuplicateEntry(usize),
    #[error("dictionary dimension r={r} must exceed the state dimension n={n}")]
    DictionaryTooSmall { r: usize, n: usize },
    #[error("invalid basis entry: {0}")]
    InvalidEntry(String),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("integration blew up at t = {time}")]
    IntegrationBlowup { time: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("singular regression system; retry with ridge_lambda > 0")]
    SingularSystem,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("sector condition violated on channel {channel} at s = {witness} (margin {margin:e})")]
    SectorViolation {
        channel: usize,
        witness: f64,
        margin: f64,
    },
    #[error("LMI synthesis infeasible: {0}")]
    SynthesisInfeasible(String),
    #[error("SDP solver failed: {0}")]
    SolverFailure(String),
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("pair (A, C) is not detectable: unobservable eigenvalue {re} + {im}i")]
    Undetectable { re: f64, im: f64 },
    #[error("Riccati iteration did not converge after {0} steps")]
    RiccatiNoConvergence(usize),
    #[error("observer diverged at t = {time}")]
    ObserverDiverged { time: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

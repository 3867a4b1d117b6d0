use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite log-weight at index {0}")]
    NonFiniteWeight(usize),
    #[error("all importance weights underflowed")]
    DegenerateWeights,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("integration left the unit simplex at t = {t}: {detail}")]
    Integration { t: f64, detail: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("Poisson rate is zero at the differencing stencil")]
    ZeroRate,
    #[error("encoder produced non-finite activations")]
    NonFiniteEncoder,
    #[error("ELBO evaluated to a non-finite value")]
    NonFiniteElbo,
    #[error("training diverged at epoch {0}")]
    TrainingDiverged(usize),
    #[error("non-finite estimate: {0}")]
    NonFiniteEstimate(String),
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("checksum mismatch in weight file")]
    Checksum,
    #[error("weight file schema error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

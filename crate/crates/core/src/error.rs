use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("zero dictionary: largest eigenvalue of D*D^T is 0, step size undefined")]
    ZeroDictionary,
    #[error("non-finite value encountered at iteration {iteration}: {context}")]
    NonFinite { iteration: usize, context: String },
    #[error("singular normal matrix in dictionary update; set ridge > 0")]
    SingularMatrix,
    #[error("scheme {scheme} requires a decomposition the model lacks: {missing}")]
    SchemeMismatch { scheme: String, missing: String },
    #[error("frozen parameter written: {0}")]
    FrozenWrite(String),
    #[error("accounting mismatch: {0}")]
    AccountingMismatch(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
    #[error("bad file format: {0}")]
    BadFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

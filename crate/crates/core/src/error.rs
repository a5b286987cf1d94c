use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants follow the failure classes the command-line tool maps onto
/// exit codes: schema/input problems, numerical breakdowns, and illegal
/// arguments to the numerical primitives.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the domain of a function (non-PSD covariance,
    /// marker value outside the link boundary, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Problem size above a configured maximum.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Numerical breakdown (singular system, non-finite objective, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed model specification or data.
    #[error("schema error: {0}")]
    Schema(String),

    /// Optimizer could not start from the supplied parameters.
    #[error("initialization error: {0}")]
    Init(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml write error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the inputs rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Domain(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::TomlDe(_)
                | Error::TomlSer(_)
                | Error::Json(_)
                | Error::Capacity(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

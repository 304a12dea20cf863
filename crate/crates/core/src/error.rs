use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type.
///
/// Variants map onto the CLI exit-code contract: config/parameter errors
/// exit 2, data errors exit 3, numeric failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("price {price} outside static no-arbitrage band [{lower}, {upper}]")]
    OutOfBand { price: f64, lower: f64, upper: f64 },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("unidentified: {0}")]
    Unidentified(String),

    #[error("collinear design: regressor `{0}` is absorbed")]
    Collinear(String),

    #[error("dependency error: missing artifact `{0}`")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code for the CLI: 0 ok, 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::MissingArtifact(_) => 2,
            Error::Data(_) | Error::MissingColumn(_) | Error::Io(_) | Error::Csv(_)
            | Error::Json(_) => 3,
            Error::Numeric(_)
            | Error::OutOfBand { .. }
            | Error::Unidentified(_)
            | Error::Collinear(_) => 4,
        }
    }
}

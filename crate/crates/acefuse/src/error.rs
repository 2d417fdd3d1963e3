use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The input data violate a structural requirement.
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A solver failed or a matrix was unusable.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The hyperparameter chain `beta >= a_1 >= ... >= a_C` does not hold.
    #[error(
        "sparsification condition violated: chain {chain:?} must be nonincreasing \
         (beta >= (1-q)/(1-q_c)*zeta_c for every class); pass --unsafe to train anyway"
    )]
    ConditionViolated { chain: Vec<f64> },

    #[error("autodiff error: {0}")]
    Graph(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConditionViolated { .. } | Error::Domain(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::NumericalAbort(_) => 4,
            Error::Shape(_) | Error::Graph(_) | Error::Format(_) | Error::Io(_) => 1,
        }
    }
}

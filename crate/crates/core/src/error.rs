use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: {x} lies outside the domain [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        x: f64,
        lo: f64,
        hi: f64,
    },

    #[error("values are not strictly increasing at index {index} ({left} >= {right})")]
    NotMonotone { index: usize, left: f64, right: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("root bracketing failed: {0}")]
    Bracket(String),

    #[error("range violation at t = {t}: {detail}")]
    Range { t: f64, detail: String },

    #[error("singular tridiagonal system at row {0}")]
    Singular(usize),

    #[error("non-positive diffusion coefficient {value} at (t = {t}, x = {x})")]
    NonPositiveCoefficient { t: f64, x: f64, value: f64 },

    #[error("simulation aborted: {0}")]
    Simulation(String),

    #[error("limit did not converge at {failed} of {total} probe points")]
    Limit { failed: usize, total: usize },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

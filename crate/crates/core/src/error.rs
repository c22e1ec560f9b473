use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid feeder: {0}")]
    InvalidFeeder(String),

    #[error("incidence matrix is singular; feeder is not radial")]
    SingularIncidence,

    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("infeasible operating point: p_g = {p_g} exceeds s_cap = {s_cap}")]
    OverCapacity { s_cap: f64, p_g: f64 },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate bounds: upper {upper} below lower {lower}")]
    DegenerateBounds { lower: f64, upper: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("linear voltage model invalid: {0}")]
    ModelValidity(String),

    #[error("moment/layout mismatch: {0}")]
    Layout(String),

    #[error("power-flow oracle diverged after {iterations} iterations (mismatch {mismatch:.3e})")]
    OracleDivergence { iterations: usize, mismatch: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

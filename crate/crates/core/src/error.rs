use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trace parse error at line {line}: {msg}")]
    TraceParse { line: usize, msg: String },

    #[error("no usable failure history before t={at} s")]
    NoHistory { at: f64 },

    #[error("invalid profile: {0}")]
    Profile(String),

    #[error("profile fit: {0}")]
    Fit(String),

    #[error("policy: {0}")]
    Policy(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("chain construction: {0}")]
    Chain(String),

    #[error("state elimination with thres={thres} left a row without targets")]
    EliminationEmptyRow { thres: f64 },

    #[error("stationary solve failed: {0}")]
    Stationary(String),

    #[error("interval search failed at I={interval} s: {source}")]
    Search {
        interval: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation: {0}")]
    Sim(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

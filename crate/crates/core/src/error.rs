use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("infeasible dataset spec: {0}")]
    Infeasible(String),

    #[error("non-finite value in `{term}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { term: String, step: Option<u64> },

    #[error("prototype warm-up incomplete: class {0} has no features yet")]
    WarmupIncomplete(usize),

    #[error("degenerate feature: zero-norm vector in cosine similarity")]
    DegenerateFeature,

    #[error("finite-difference check hit a ReLU kink too often ({0} resamples)")]
    Kink(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

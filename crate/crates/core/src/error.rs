use std::path::PathBuf;

/// Errors produced by mesh construction, coefficient handling, assembly and solves.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("input data is not aligned with fine triangle {triangle}: {detail}")]
    Alignment { triangle: usize, detail: String },

    #[error("I/O error on {path}: {source}{hint}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
        hint: String,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("numerical assembly error: {0}")]
    NumericalAssembly(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank deficient saddle system: {detail} (block `{block}`)")]
    Rank { block: String, detail: String },

    #[error("solver failure: {detail} (relative residual {relative_residual:e})")]
    Solver {
        detail: String,
        relative_residual: f64,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
            hint: String::new(),
        }
    }

    /// Wraps the error with a short description of what was being computed.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips [`Error::Context`] layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

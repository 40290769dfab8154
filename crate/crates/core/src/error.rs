use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("state ({x}, {z}) lies outside the Bloch disk")]
    InvalidState { x: f64, z: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("{}line {line}: {reason}", source_name(.path))]
    Record {
        path: Option<PathBuf>,
        line: usize,
        reason: String,
    },

    #[error("path integration diverged at t = {t:e} s (|p| = {magnitude:e})")]
    Divergence { t: f64, magnitude: f64 },

    #[error("shooting found no root from {starts} starts (best residual {best_residual:e})")]
    NoRoot {
        starts: usize,
        best_residual: f64,
        /// `(p_x(0), p_z(0), terminal residual)` at the end of each start.
        landscape: Vec<(f64, f64, f64)>,
    },

    #[error("insufficient statistics for {what}: need {needed}, have {got}")]
    InsufficientStatistics {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn source_name(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!("{}: ", p.display()),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes used by the command-line front end.
pub mod exit_code {
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const CONVERGENCE: i32 = 3;
    pub const INSUFFICIENT_STATISTICS: i32 = 4;
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter { .. }
            | Error::InvalidState { .. }
            | Error::Record { .. }
            | Error::Json { .. } => exit_code::CONFIG,
            Error::Divergence { .. } | Error::NoRoot { .. } => exit_code::CONVERGENCE,
            Error::InsufficientStatistics { .. } => exit_code::INSUFFICIENT_STATISTICS,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Calibration(_) | Error::Io { .. } => exit_code::FAILURE,
        }
    }
}

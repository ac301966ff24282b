use std::path::{Path, PathBuf};

use serde::Serialize;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the std layer, grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Core(#[from] facegaze_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const IO: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

impl Error {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Error::Io { path: path.to_path_buf(), message: err.to_string() }
    }

    pub fn parse(path: &Path, message: impl Into<String>) -> Self {
        Error::Parse { path: path.to_path_buf(), message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn kind(&self) -> &'static str {
        use facegaze_core::Error as C;
        match self {
            Error::Config(_) => "validation",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Core(e) => match e {
                C::InvalidArgument(_) => "invalid_argument",
                C::Validation(_) => "validation",
                C::Precondition(_) => "precondition",
                C::DegenerateScenario(_) => "degenerate_scenario",
                C::DegenerateGeometry(_) => "degenerate_geometry",
                C::NoCorrespondence { .. } => "no_correspondence",
                C::NumericalFailure { .. } => "numerical_failure",
                C::Infeasible { .. } => "infeasible",
                C::Extraction(_) => "extraction",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        use facegaze_core::Error as C;
        match self {
            Error::Config(_) => exit::VALIDATION,
            Error::Io { .. } | Error::Parse { .. } => exit::IO,
            Error::Core(e) => match e {
                C::InvalidArgument(_) | C::Validation(_) | C::Precondition(_) | C::DegenerateScenario(_) => {
                    exit::VALIDATION
                }
                C::DegenerateGeometry(_)
                | C::NoCorrespondence { .. }
                | C::NumericalFailure { .. }
                | C::Infeasible { .. }
                | C::Extraction(_) => exit::NUMERICAL,
            },
        }
    }

    /// Machine-readable form written to standard error by the binary.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
            exit_code: i32,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        let w = Wrapper { error: Body { kind: self.kind(), message: self.to_string(), exit_code: self.exit_code() } };
        serde_json::to_string(&w).expect("error JSON serializes")
    }
}

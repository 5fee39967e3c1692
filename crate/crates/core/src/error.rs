use thiserror::Error;

/// Errors produced anywhere in the simulator, capacity calculator and optimizer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("resolution {width}x{height} is not in the patch table of model `{model}`")]
    UnknownResolution {
        model: String,
        width: u32,
        height: u32,
    },

    #[error("unknown model preset `{0}`")]
    UnknownModel(String),

    #[error("unknown experiment preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("infeasible configuration: {0}")]
    ConfigInfeasible(String),

    #[error("request {request} can never fit: {reason}")]
    CapacityExceeded { request: u64, reason: String },

    #[error("request {0} did not complete")]
    IncompleteRequest(u64),

    #[error("empty request set")]
    EmptySet,

    #[error("no feasible candidate in the search space")]
    EmptyFeasibleSet,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line frontend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInfeasible(_) | Error::EmptyFeasibleSet => 2,
            Error::Parse { .. } | Error::TomlDe(_) | Error::Csv(_) | Error::Json(_) => 3,
            _ => 1,
        }
    }

    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownResolution { .. } => "UnknownResolution",
            Error::UnknownModel(_) => "UnknownModel",
            Error::UnknownPreset(_) => "UnknownPreset",
            Error::Invalid { .. } => "Invalid",
            Error::ConfigInfeasible(_) => "ConfigInfeasible",
            Error::CapacityExceeded { .. } => "CapacityExceeded",
            Error::IncompleteRequest(_) => "IncompleteRequest",
            Error::EmptySet => "EmptySet",
            Error::EmptyFeasibleSet => "EmptyFeasibleSet",
            Error::Parse { .. } => "ParseError",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
            Error::TomlDe(_) => "ParseError",
            Error::TomlSer(_) => "Serialize",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

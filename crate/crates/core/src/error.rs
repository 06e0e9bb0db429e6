use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory space: {0}")]
    InvalidSpace(String),

    #[error("trajectory space holds {count} trajectories, above the enumeration cap of {cap}")]
    EnumerationTooLarge { count: u128, cap: u64 },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid group: {0}")]
    InvalidGroup(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("support violation at trajectory {trajectory}: {detail}")]
    SupportViolation { trajectory: String, detail: String },

    #[error("design matrix is rank deficient; use a positive ridge penalty")]
    RankDeficient,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric overflow: {0}")]
    Overflow(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the error originates from configuration rather than computation.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parse(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

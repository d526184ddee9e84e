use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("missing input {0}; run the producing command first")]
    MissingInput(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] reflmap::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::TomlDe(_) | CliError::TomlSer(_) => 2,
            _ => 3,
        }
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        })*
    };
}

core_from!(
    reflmap::envsim::EnvError,
    reflmap::mapbuilder::MapError,
    reflmap::localizer::LocalizeError,
    reflmap::bounds::BoundsError,
    reflmap::grid::GridError,
    reflmap::geometry::GeometryError,
    reflmap::polygon::PolygonError
);

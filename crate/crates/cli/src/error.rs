use std::fmt;

use serde_json::json;

/// Module tags used in runtime diagnostics.
pub mod module {
    pub const PROBE_DATA: &str = "probe-data";
    pub const ENCODER_CORE: &str = "encoder-core";
    pub const DECODER_HEADS: &str = "decoder-heads";
    pub const EMBEDDING_IO: &str = "embedding-io";
    pub const PROBING_METRICS: &str = "probing-metrics";
    pub const OVERLAP_INDEX: &str = "overlap-index";
    pub const CAPACITY_DRIVER: &str = "capacity-driver";
    pub const CLI_REPORT: &str = "cli-report";
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// The config is malformed, incomplete, or names a missing file. Exit 2.
    Schema { field: String, message: String },
    /// A pipeline failed while running. Exit 1.
    Runtime { module: &'static str, message: String },
}

impl CliError {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema { field: field.into(), message: message.into() }
    }

    pub fn runtime(module: &'static str, message: impl Into<String>) -> Self {
        Self::Runtime { module, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Schema { .. } => 2,
            Self::Runtime { .. } => 1,
        }
    }

    /// The machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Self::Schema { field, message } => json!({ "error": "schema", "field": field, "message": message }),
            Self::Runtime { module, message } => json!({ "error": "runtime", "module": module, "message": message }),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Schema { field, message } => write!(f, "config error in `{field}`: {message}"),
            Self::Runtime { module, message } => write!(f, "[{module}] {message}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Turns any displayable error into a module-tagged runtime error.
pub(crate) trait Tag<T> {
    fn tag(self, module: &'static str) -> CliResult<T>;
}

impl<T, E: fmt::Display> Tag<T> for Result<T, E> {
    fn tag(self, module: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError::runtime(module, e.to_string()))
    }
}

//! Stage orchestration for the `psam` command line tool.
//!
//! Every stage writes into `<output-root>/<stage>/<key>/`, where `key` hashes
//! the stage's resolved configuration together with its upstream key.
//! Rerunning with an unchanged configuration finds the finished directory and
//! skips the work; changing a parameter only recomputes the stages that
//! depend on it.

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod results;
pub mod sweep;

pub use config::PipelineConfig;
pub use pipeline::{Stage, StageOutcome, Workspace};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "PSAM_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs the output of `{upstream}`; run `psam {upstream}` first (or `psam run`)")]
    MissingUpstream {
        stage: &'static str,
        upstream: &'static str,
    },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] psam_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// `1` for configuration problems, `2` for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

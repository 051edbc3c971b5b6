//! Experiment harness: scenario files, presets, and report generation.

pub mod presets;
pub mod report;
pub mod scenario;

/// Harness failures, split by exit code: configuration problems exit with 2,
/// runtime failures with 3.
#[derive(Debug)]
pub enum HarnessError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "configuration error: {m}"),
            HarnessError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for HarnessError {}

//! Library half of the `glioseg` command: configuration loading, the
//! pipeline stages and the self-test, shared by the binary and its tests.

pub mod config;
pub mod selftest;
pub mod stages;

use std::fmt;

/// A failure carrying the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const SELFTEST: u8 = 1;
    pub const DATASET: u8 = 2;
    pub const MISSING: u8 = 3;
    pub const CONFIG: u8 = 4;

    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn selftest(message: impl Into<String>) -> Self {
        Self::new(Self::SELFTEST, message)
    }

    pub fn dataset(message: impl Into<String>) -> Self {
        Self::new(Self::DATASET, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(Self::MISSING, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Self::CONFIG, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<glioseg::Error> for CliError {
    fn from(e: glioseg::Error) -> Self {
        use glioseg::Error as E;
        let code = match &e {
            E::Config(_) => Self::CONFIG,
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Self::MISSING,
            _ => Self::DATASET,
        };
        Self::new(code, e.to_string())
    }
}

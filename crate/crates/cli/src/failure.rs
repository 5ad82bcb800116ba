//! Command failures and their exit codes.

use std::fmt;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    /// A verification command ran to completion and found a violation.
    Check(String),
    Io(String),
    Core(rawvid_core::Error),
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Config(_) => "config",
            Failure::Check(_) => "check",
            Failure::Io(_) => "io",
            Failure::Core(e) => e.kind(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Config(_) | Failure::Core(rawvid_core::Error::Config(_)) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }

    /// `error: kind=<kind> msg=<json string>` on one line.
    pub fn line(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).expect("strings serialize");
        format!("error: kind={} msg={msg}", self.kind())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Check(m) | Failure::Io(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<rawvid_core::Error> for Failure {
    fn from(e: rawvid_core::Error) -> Self {
        Failure::Core(e)
    }
}

pub fn io_failure(what: &str, path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("cannot {what} {}: {e}", path.display()))
}

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use hedgegrad::{Error, ErrorClass};

/// Failure of a subcommand, reported as one JSON line on stderr.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(Error::io(path, source))
    }

    fn class(&self) -> ErrorClass {
        match self {
            CliError::Usage(_) => ErrorClass::Validation,
            CliError::Core(e) => e.class(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class() {
            ErrorClass::Validation => 2,
            ErrorClass::Io => 3,
            ErrorClass::Numeric => 4,
        }
    }

    pub fn report(&self) -> ExitCode {
        let kind = match self.class() {
            ErrorClass::Validation => "validation",
            ErrorClass::Io => "io",
            ErrorClass::Numeric => "numeric",
        };
        let line = serde_json::json!({
            "code": self.exit_code(),
            "kind": kind,
            "message": self.to_string().replace('\n', " "),
        });
        eprintln!("{line}");
        ExitCode::from(self.exit_code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

/// What went wrong, grouped by the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, unknown names, corrupt input logs. Exit 2.
    Usage(String),
    /// The host refused something: memory, locking, output files. Exit 3.
    Environment(String),
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        CliError::Usage(msg.to_string())
    }

    pub fn env(msg: impl fmt::Display) -> Self {
        CliError::Environment(msg.to_string())
    }

    /// A config problem pinned to a line of the file.
    pub fn at_line(path: &Path, line: Option<usize>, msg: impl fmt::Display) -> Self {
        match line {
            Some(l) => CliError::Usage(format!("{}:{l}: {msg}", path.display())),
            None => CliError::Usage(format!("{}: {msg}", path.display())),
        }
    }

    pub fn write_failed(path: &Path, e: std::io::Error) -> Self {
        CliError::Environment(format!("cannot write {}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Environment(_) => ExitCode::from(3),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Environment(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Successful outcomes that still carry a signal for scripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Clean,
    /// A live scan saw at least one flip.
    Detections,
}

impl Status {
    pub fn exit_code(self) -> ExitCode {
        match self {
            Status::Clean => ExitCode::SUCCESS,
            Status::Detections => ExitCode::from(1),
        }
    }
}

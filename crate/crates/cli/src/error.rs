use std::fmt;
use std::path::Path;

/// Failure classes, each mapped to a process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration (exit 1).
    Usage(String),
    /// Unreadable, malformed or inconsistent input data, or unwritable output (exit 2).
    Data(String),
    /// The estimation itself broke down (exit 3).
    Numerical(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        let line = e.position().map(|p| format!(" (line {})", p.line())).unwrap_or_default();
        CliError::Data(format!("{}{line}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<hdgc::Error> for CliError {
    fn from(e: hdgc::Error) -> Self {
        use hdgc::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_) | E::TooManyClusters { .. } | E::NoReplicates | E::UnknownStation(_) => {
                CliError::Usage(msg)
            }
            E::NotPositiveDefinite { .. }
            | E::NonPositiveDenominator(_)
            | E::NonMonotone { .. }
            | E::RangeSearch
            | E::UninformativeStation(_) => CliError::Numerical(msg),
            _ => CliError::Data(msg),
        }
    }
}

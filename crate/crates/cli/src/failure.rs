use std::fmt;
use std::process::ExitCode;

use tokattr_core::Error;

/// Failure categories, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Transport,
    Nondeterministic,
    Internal,
}

impl Kind {
    pub fn exit_code(self) -> ExitCode {
        ExitCode::from(match self {
            Kind::Usage => 1,
            Kind::Transport => 2,
            Kind::Nondeterministic => 3,
            Kind::Internal => 4,
        })
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Usage, anyhow::anyhow!("{msg}"))
    }

    pub fn internal(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Internal, anyhow::anyhow!("{msg}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match e.root() {
            Error::Usage(_) | Error::Degenerate(_) => Kind::Usage,
            Error::Transport(_) => Kind::Transport,
            _ => Kind::Internal,
        };
        Self::new(kind, e)
    }
}

impl From<tokattr_gateway::GatewayError> for Failure {
    fn from(e: tokattr_gateway::GatewayError) -> Self {
        Error::from(e).into()
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Output-side I/O failures are internal; input-side ones are mapped to
/// usage errors at the call site.
pub fn io_internal<T>(r: std::io::Result<T>, what: &str) -> CliResult<T> {
    r.map_err(|e| Failure::new(Kind::Internal, anyhow::Error::new(e).context(what.to_string())))
}

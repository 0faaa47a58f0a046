use thiserror::Error;

/// Errors raised by the attribution engine and its backends.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// The caller supplied arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// The backend could not be reached or returned a malformed reply.
    #[error("transport error: {0}")]
    Transport(String),

    /// The model assigns zero probability to a quantity the score divides by.
    #[error("degenerate probability: {0}")]
    Degenerate(String),

    #[error("internal error: {0}")]
    Internal(String),

    /// An error raised while processing one prompt position.
    #[error("position {position}: {source}")]
    AtPosition {
        position: usize,
        #[source]
        source: Box<Error>,
    },

    /// Several positions failed; each entry keeps its position context.
    #[error("{} positions failed: {}", .0.len(), join_errors(.0))]
    Multiple(Vec<Error>),
}

fn join_errors(errors: &[Error]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn transport(msg: impl Into<String>) -> Self {
        Error::Transport(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn at_position(self, position: usize) -> Self {
        Error::AtPosition {
            position,
            source: Box::new(self),
        }
    }

    /// The innermost error kind, looking through position wrappers.
    /// For `Multiple`, the first contained error decides.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtPosition { source, .. } => source.root(),
            Error::Multiple(errs) if !errs.is_empty() => errs[0].root(),
            other => other,
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self.root(), Error::Transport(_))
    }

    pub fn is_usage(&self) -> bool {
        matches!(self.root(), Error::Usage(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("cannot reach gateway: {0}")]
    Transport(String),

    #[error("gateway speaks {found:?}, expected {expected:?}")]
    VersionMismatch { expected: String, found: String },

    /// A well-formed error envelope returned with a non-200 status.
    #[error("gateway returned {status} {code}: {message}")]
    Remote { status: u16, code: String, message: String },

    #[error("job {id} failed with {code}: {message}")]
    Job { id: String, code: String, message: String },

    #[error("malformed gateway reply: {0}")]
    Decode(String),
}

impl GatewayError {
    /// Whether retrying the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Remote { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Rejected requests become usage errors; everything else is a transport
/// failure from the engine's point of view.
impl From<GatewayError> for tokattr_core::Error {
    fn from(e: GatewayError) -> Self {
        let client_fault = match &e {
            GatewayError::Remote { status, .. } => (400..500).contains(status),
            GatewayError::Job { code, .. } => code == "bad_request",
            _ => false,
        };
        if client_fault {
            tokattr_core::Error::usage(e.to_string())
        } else {
            tokattr_core::Error::transport(e.to_string())
        }
    }
}

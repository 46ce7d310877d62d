use serde::Serialize;
use serde_json::Value as Json;
use thiserror::Error;

use crate::audit::{AuditError, VaultError};
use crate::compliance::ComplianceError;
use crate::gateway::StateError;
use crate::iam::{DenyReason, IamError};
use crate::interop::InteropError;
use crate::monitor::MonitorError;
use crate::quality::QualityError;
use crate::registry::RegistryError;
use crate::review::ReviewError;
use crate::usability::UsabilityError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Unauthenticated,
    Forbidden,
    NotFound,
    Conflict,
    /// Operation not legal in the object's current state.
    State,
    Invalid,
    /// A governance gate refused the operation.
    Refused,
    Upstream,
    Internal,
}

impl ErrorKind {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorKind::Unauthenticated => 401,
            ErrorKind::Forbidden => 403,
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict | ErrorKind::State => 409,
            ErrorKind::Invalid | ErrorKind::Refused => 422,
            ErrorKind::Upstream => 502,
            ErrorKind::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("{message}")]
pub struct PlatformError {
    pub kind: ErrorKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Json>,
}

impl PlatformError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Serialize) -> Self {
        self.detail = serde_json::to_value(detail).ok();
        self
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, format!("{} not found", what.into()))
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Invalid, message)
    }

    pub fn refused(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Refused, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, message)
    }
}

impl From<&DenyReason> for PlatformError {
    fn from(r: &DenyReason) -> Self {
        let kind = match r {
            DenyReason::InvalidSession | DenyReason::Inactive => ErrorKind::Unauthenticated,
            DenyReason::Forbidden { .. } => ErrorKind::Forbidden,
        };
        Self::new(kind, r.to_string()).with_detail(r)
    }
}

impl From<AuditError> for PlatformError {
    fn from(e: AuditError) -> Self {
        Self::internal(e.to_string())
    }
}

impl From<VaultError> for PlatformError {
    fn from(e: VaultError) -> Self {
        Self::internal(e.to_string())
    }
}

impl From<RegistryError> for PlatformError {
    fn from(e: RegistryError) -> Self {
        match &e {
            RegistryError::Conflict(_) | RegistryError::DuplicateEvaluation(_) => {
                Self::new(ErrorKind::Conflict, e.to_string())
            }
            RegistryError::Invalid(report) => Self::invalid("passport invalid").with_detail(report),
            RegistryError::NotFound(_) => Self::new(ErrorKind::NotFound, e.to_string()),
            RegistryError::Rejected(_) => Self::invalid(e.to_string()),
        }
    }
}

impl From<IamError> for PlatformError {
    fn from(e: IamError) -> Self {
        let kind = match e {
            IamError::InvalidCredentials | IamError::Inactive => ErrorKind::Unauthenticated,
            IamError::Conflict(_) => ErrorKind::Conflict,
            IamError::NotFound(_) => ErrorKind::NotFound,
            IamError::WeakSecret(_) | IamError::EmptyUserId => ErrorKind::Invalid,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ReviewError> for PlatformError {
    fn from(e: ReviewError) -> Self {
        let kind = match e {
            ReviewError::InsufficientPool { .. } | ReviewError::Empty => ErrorKind::Invalid,
            ReviewError::NotFound(_) | ReviewError::NoItem(_) => ErrorKind::NotFound,
            ReviewError::NotOwner => ErrorKind::Forbidden,
            ReviewError::Completed | ReviewError::Unanswered(_) => ErrorKind::State,
            ReviewError::AlreadyAnswered(_) => ErrorKind::Conflict,
        };
        let err = Self::new(kind, e.to_string());
        match e {
            ReviewError::InsufficientPool {
                available,
                requested,
            } => err
                .with_detail(serde_json::json!({ "available": available, "requested": requested })),
            _ => err,
        }
    }
}

impl From<MonitorError> for PlatformError {
    fn from(e: MonitorError) -> Self {
        let kind = match e {
            MonitorError::Duplicate(_) => ErrorKind::Conflict,
            _ => ErrorKind::Invalid,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<StateError> for PlatformError {
    fn from(e: StateError) -> Self {
        Self::new(ErrorKind::State, e.to_string())
    }
}

macro_rules! invalid_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PlatformError {
            fn from(e: $t) -> Self {
                Self::invalid(e.to_string())
            }
        }
    )*};
}

invalid_from!(ComplianceError, InteropError, QualityError, UsabilityError);

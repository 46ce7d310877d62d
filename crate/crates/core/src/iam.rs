//! Accounts, roles, sessions and the static role-permission matrix.

use std::collections::BTreeMap;

use argon2::{Algorithm, Argon2, Params, Version};
use chrono::{DateTime, TimeDelta, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::digest::digest_str;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Clinician,
    Researcher,
    Auditor,
    Admin,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Clinician,
        Role::Researcher,
        Role::Auditor,
        Role::Admin,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SubmitPrediction,
    SubmitAcademicPrediction,
    ConfirmJob,
    ExecuteJob,
    ViewJobs,
    SubmitGroundTruth,
    ReadPassport,
    RegisterService,
    ManageCertifications,
    ConfigureGovernance,
    ManageUsers,
    AcknowledgeDisclaimer,
    ReadCoverage,
    AssessQuality,
    IngestCase,
    ReadAudit,
    ExportAudit,
    ReadMonitor,
    ComputeSnapshot,
    DeclareBias,
    RunBiasTest,
    ReadBias,
    RunReview,
    AnswerUsability,
    AggregateUsability,
}

impl Action {
    pub const ALL: [Action; 25] = [
        Action::SubmitPrediction,
        Action::SubmitAcademicPrediction,
        Action::ConfirmJob,
        Action::ExecuteJob,
        Action::ViewJobs,
        Action::SubmitGroundTruth,
        Action::ReadPassport,
        Action::RegisterService,
        Action::ManageCertifications,
        Action::ConfigureGovernance,
        Action::ManageUsers,
        Action::AcknowledgeDisclaimer,
        Action::ReadCoverage,
        Action::AssessQuality,
        Action::IngestCase,
        Action::ReadAudit,
        Action::ExportAudit,
        Action::ReadMonitor,
        Action::ComputeSnapshot,
        Action::DeclareBias,
        Action::RunBiasTest,
        Action::ReadBias,
        Action::RunReview,
        Action::AnswerUsability,
        Action::AggregateUsability,
    ];
}

/// The role-permission matrix. Total over `Role x Action`.
///
/// Clinicians treat (submit, confirm, execute, ground truth). Researchers work
/// in academic mode and review sessions only. Auditors read. Admins write
/// registry, IAM and compliance state but never treat patients.
pub fn permits(role: Role, action: Action) -> bool {
    use Action::*;
    match role {
        Role::Clinician => matches!(
            action,
            SubmitPrediction
                | SubmitAcademicPrediction
                | ConfirmJob
                | ExecuteJob
                | ViewJobs
                | SubmitGroundTruth
                | ReadPassport
                | AcknowledgeDisclaimer
                | ReadCoverage
                | AssessQuality
                | IngestCase
                | ReadMonitor
                | ReadBias
                | RunReview
                | AnswerUsability
        ),
        Role::Researcher => matches!(
            action,
            SubmitAcademicPrediction
                | ConfirmJob
                | ExecuteJob
                | ViewJobs
                | ReadPassport
                | AcknowledgeDisclaimer
                | ReadCoverage
                | AssessQuality
                | IngestCase
                | ReadMonitor
                | ReadBias
                | RunReview
                | AnswerUsability
        ),
        Role::Auditor => matches!(
            action,
            ViewJobs
                | ReadPassport
                | ReadCoverage
                | ReadAudit
                | ExportAudit
                | ReadMonitor
                | ReadBias
        ),
        Role::Admin => matches!(
            action,
            ReadPassport
                | RegisterService
                | ManageCertifications
                | ConfigureGovernance
                | ManageUsers
                | ReadCoverage
                | AssessQuality
                | IngestCase
                | ReadAudit
                | ExportAudit
                | ReadMonitor
                | ComputeSnapshot
                | DeclareBias
                | RunBiasTest
                | ReadBias
                | AggregateUsability
        ),
    }
}

/// Public view of an account. Carries no credential material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: String,
    pub display_name: String,
    pub organisation: String,
    pub role: Role,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewAccount {
    pub user_id: String,
    pub display_name: String,
    pub organisation: String,
    pub role: Role,
    pub secret: String,
}

/// Stored account. Only ever serialized into the platform's own state file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StoredAccount {
    account: UserAccount,
    credential: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub user_id: String,
    #[serde(with = "crate::timefmt::millis")]
    pub created_at: DateTime<Utc>,
    #[serde(with = "crate::timefmt::millis")]
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StoredSession {
    user_id: String,
    #[serde(with = "crate::timefmt::millis")]
    created_at: DateTime<Utc>,
    #[serde(with = "crate::timefmt::millis")]
    expires_at: DateTime<Utc>,
}

/// Memory-hard hashing cost. The argon2id salt is always 128 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashCost {
    pub memory_kib: u32,
    pub iterations: u32,
}

impl Default for HashCost {
    fn default() -> Self {
        Self {
            memory_kib: 19 * 1024,
            iterations: 2,
        }
    }
}

impl HashCost {
    /// For tests only.
    pub const fn minimal() -> Self {
        Self {
            memory_kib: 64,
            iterations: 1,
        }
    }
}

const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;

fn derive(secret: &str, salt: &[u8], cost: HashCost) -> [u8; HASH_LEN] {
    let params = Params::new(cost.memory_kib, cost.iterations, 1, Some(HASH_LEN))
        .expect("valid argon2 params");
    let mut out = [0u8; HASH_LEN];
    Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
        .hash_password_into(secret.as_bytes(), salt, &mut out)
        .expect("argon2 hashing with valid params");
    out
}

/// `argon2id$m=<kib>,t=<iters>$<salt hex>$<hash hex>`
pub fn hash_secret(secret: &str, cost: HashCost) -> String {
    let mut salt = [0u8; SALT_LEN];
    rand::rng().fill_bytes(&mut salt);
    let hash = derive(secret, &salt, cost);
    format!(
        "argon2id$m={},t={}${}${}",
        cost.memory_kib,
        cost.iterations,
        hex::encode(salt),
        hex::encode(hash)
    )
}

pub fn verify_secret(secret: &str, credential: &str) -> bool {
    let parts: Vec<&str> = credential.split('$').collect();
    let [alg, params, salt, hash] = parts.as_slice() else {
        return false;
    };
    if *alg != "argon2id" {
        return false;
    }
    let mut cost = HashCost::minimal();
    for kv in params.split(',') {
        match kv.split_once('=') {
            Some(("m", v)) => cost.memory_kib = v.parse().unwrap_or(0),
            Some(("t", v)) => cost.iterations = v.parse().unwrap_or(0),
            _ => return false,
        }
    }
    if Params::new(cost.memory_kib, cost.iterations, 1, Some(HASH_LEN)).is_err() {
        return false;
    }
    let (Ok(salt), Ok(expected)) = (hex::decode(salt), hex::decode(hash)) else {
        return false;
    };
    let actual = derive(secret, &salt, cost);
    actual.ct_eq(expected.as_slice()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IamConfig {
    #[serde(with = "seconds")]
    pub session_lifetime: TimeDelta,
    pub hash_cost: HashCost,
    pub min_secret_len: usize,
}

mod seconds {
    use chrono::TimeDelta;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &TimeDelta, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(d.num_seconds())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TimeDelta, D::Error> {
        Ok(TimeDelta::seconds(i64::deserialize(d)?))
    }
}

impl Default for IamConfig {
    fn default() -> Self {
        Self {
            session_lifetime: TimeDelta::hours(8),
            hash_cost: HashCost::default(),
            min_secret_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IamError {
    /// Same error for unknown user and wrong secret.
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("account is inactive")]
    Inactive,
    #[error("user `{0}` already exists")]
    Conflict(String),
    #[error("user `{0}` not found")]
    NotFound(String),
    #[error("secret must be at least {0} characters")]
    WeakSecret(usize),
    #[error("user id must not be empty")]
    EmptyUserId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DenyReason {
    InvalidSession,
    Inactive,
    Forbidden { role: Role, action: Action },
}

impl std::fmt::Display for DenyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DenyReason::InvalidSession => f.write_str("invalid_session"),
            DenyReason::Inactive => f.write_str("inactive_account"),
            DenyReason::Forbidden { role, action } => write!(f, "role {role:?} may not {action:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow(UserAccount),
    Deny(DenyReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iam {
    config: IamConfig,
    accounts: BTreeMap<String, StoredAccount>,
    /// Keyed by digest of the bearer token, so persisted state holds no usable tokens.
    sessions: BTreeMap<String, StoredSession>,
    /// Used to equalize work for unknown user ids.
    dummy_credential: String,
}

impl Default for Iam {
    fn default() -> Self {
        Self::new(IamConfig::default())
    }
}

impl Iam {
    pub fn new(config: IamConfig) -> Self {
        Self {
            dummy_credential: hash_secret("dummy-secret-for-timing", config.hash_cost),
            config,
            accounts: BTreeMap::new(),
            sessions: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &IamConfig {
        &self.config
    }

    pub fn is_empty(&self) -> bool {
        self.accounts.is_empty()
    }

    pub fn create_user(&mut self, new: NewAccount) -> Result<UserAccount, IamError> {
        if new.user_id.trim().is_empty() {
            return Err(IamError::EmptyUserId);
        }
        if self.accounts.contains_key(&new.user_id) {
            return Err(IamError::Conflict(new.user_id));
        }
        if new.secret.chars().count() < self.config.min_secret_len {
            return Err(IamError::WeakSecret(self.config.min_secret_len));
        }
        let account = UserAccount {
            user_id: new.user_id.clone(),
            display_name: new.display_name,
            organisation: new.organisation,
            role: new.role,
            active: true,
        };
        self.accounts.insert(
            new.user_id,
            StoredAccount {
                account: account.clone(),
                credential: hash_secret(&new.secret, self.config.hash_cost),
            },
        );
        Ok(account)
    }

    pub fn set_active(&mut self, user_id: &str, active: bool) -> Result<UserAccount, IamError> {
        let stored = self
            .accounts
            .get_mut(user_id)
            .ok_or_else(|| IamError::NotFound(user_id.to_string()))?;
        stored.account.active = active;
        if !active {
            self.sessions.retain(|_, s| s.user_id != user_id);
        }
        Ok(stored.account.clone())
    }

    pub fn account(&self, user_id: &str) -> Option<&UserAccount> {
        self.accounts.get(user_id).map(|s| &s.account)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &UserAccount> {
        self.accounts.values().map(|s| &s.account)
    }

    pub fn authenticate(
        &mut self,
        user_id: &str,
        secret: &str,
        now: DateTime<Utc>,
    ) -> Result<Session, IamError> {
        let Some(stored) = self.accounts.get(user_id) else {
            verify_secret(secret, &self.dummy_credential);
            return Err(IamError::InvalidCredentials);
        };
        if !verify_secret(secret, &stored.credential) {
            return Err(IamError::InvalidCredentials);
        }
        if !stored.account.active {
            return Err(IamError::Inactive);
        }
        let token = crate::ids::new_token();
        let session = Session {
            token: token.clone(),
            user_id: user_id.to_string(),
            created_at: now,
            expires_at: now + self.config.session_lifetime,
        };
        self.sessions.retain(|_, s| s.expires_at > now);
        self.sessions.insert(
            digest_str(&token),
            StoredSession {
                user_id: session.user_id.clone(),
                created_at: session.created_at,
                expires_at: session.expires_at,
            },
        );
        Ok(session)
    }

    pub fn logout(&mut self, token: &str) -> Option<String> {
        self.sessions.remove(&digest_str(token)).map(|s| s.user_id)
    }

    /// Resolve a bearer token to its live account.
    pub fn resolve(&self, token: &str, now: DateTime<Utc>) -> Result<&UserAccount, DenyReason> {
        let session = self
            .sessions
            .get(&digest_str(token))
            .filter(|s| now < s.expires_at)
            .ok_or(DenyReason::InvalidSession)?;
        let account = self
            .account(&session.user_id)
            .ok_or(DenyReason::InvalidSession)?;
        if !account.active {
            return Err(DenyReason::Inactive);
        }
        Ok(account)
    }

    /// Pure decision; the platform emits the audit record for denials.
    pub fn authorize(&self, token: &str, action: Action, now: DateTime<Utc>) -> Decision {
        match self.resolve(token, now) {
            Err(reason) => Decision::Deny(reason),
            Ok(account) if permits(account.role, action) => Decision::Allow(account.clone()),
            Ok(account) => Decision::Deny(DenyReason::Forbidden {
                role: account.role,
                action,
            }),
        }
    }
}

//! The governed platform: every module behind one authorization and audit
//! boundary, with optional on-disk persistence.
//!
//! Locking: one mutex guards state, audit log and vault together. Every
//! operation appends its audit record before mutating state. Model calls run
//! with the lock released.

mod error;
mod evaluation;
mod governance;
mod jobs;
pub mod pipeline;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, MutexGuard};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audit::{
    AuditAction, AuditEvent, AuditLog, AuditRecord, PayloadVault, SegmentedFileStorage, VaultKey,
};
use crate::bias::BiasStore;
use crate::clock::Clock;
use crate::compliance::Compliance;
use crate::gateway::{
    CallLimiter, ModelAdapter, PredictionJob, StubAdapter, DEFAULT_ADAPTER_TIMEOUT,
    DEFAULT_MAX_CONCURRENT_CALLS,
};
use crate::iam::{Action, Decision, Iam, IamConfig, Role};
use crate::interop::{MappingProfile, UnitTable};
use crate::monitor::{Monitor, MonitorConfig};
use crate::registry::Registry;
use crate::review::Reviews;
use crate::usability::Usability;
use crate::xai::ExplainConfig;

pub use error::{ErrorKind, PlatformError};
pub use evaluation::{BiasCase, BiasTestRequest, BiasView, NewReview, PerformanceView, PromptView};
pub use governance::{
    AckRequest, DisclaimerView, GovernanceUpdate, IngestRequest, IngestResult, QualityCaseRequest,
    QualityDatasetRequest,
};
pub use jobs::{ConfirmRequest, NewJob};

pub type Result<T, E = PlatformError> = std::result::Result<T, E>;

/// Endpoint prefix served by the in-process stub model.
pub const STUB_SCHEME: &str = "stub:";

/// Who is calling. Local administration (CLI) acts as the system actor.
#[derive(Debug, Clone, Copy)]
pub enum Caller<'a> {
    Token(&'a str),
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub user_id: String,
    pub organisation: String,
    /// `None` for the system actor.
    pub role: Option<Role>,
}

impl Actor {
    fn system() -> Self {
        Self {
            user_id: crate::audit::SYSTEM_ACTOR.into(),
            organisation: crate::audit::SYSTEM_ACTOR.into(),
            role: None,
        }
    }

    pub fn is_system(&self) -> bool {
        self.role.is_none()
    }
}

/// Builds the adapter for a registered endpoint.
pub trait AdapterFactory: Send + Sync {
    fn adapter(&self, endpoint: &str, timeout: Duration) -> Result<Arc<dyn ModelAdapter>, String>;
}

/// Serves `stub:` endpoints only.
#[derive(Debug, Clone, Default)]
pub struct StubFactory;

impl AdapterFactory for StubFactory {
    fn adapter(&self, endpoint: &str, _: Duration) -> Result<Arc<dyn ModelAdapter>, String> {
        if endpoint.starts_with(STUB_SCHEME) {
            Ok(Arc::new(StubAdapter::default()))
        } else {
            Err(format!("no adapter for endpoint `{endpoint}`"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    /// Jurisdiction used for regulation checks (ISO country code).
    pub jurisdiction: String,
    /// Whether the API is served over TLS. Feeds the coverage report.
    pub transport_encrypted: bool,
    pub iam: IamConfig,
    pub monitor: MonitorConfig,
    pub explain: ExplainConfig,
    #[serde(with = "secs")]
    pub adapter_timeout: Duration,
    pub max_concurrent_calls: usize,
    pub ground_truth_same_organisation: bool,
    pub disclaimer_text: String,
    pub bias_min_group_n: usize,
    pub usability_cadence_days: i64,
    pub audit_segment_bytes: u64,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            jurisdiction: "ES".into(),
            transport_encrypted: false,
            iam: IamConfig::default(),
            monitor: MonitorConfig::default(),
            explain: ExplainConfig::default(),
            adapter_timeout: DEFAULT_ADAPTER_TIMEOUT,
            max_concurrent_calls: DEFAULT_MAX_CONCURRENT_CALLS,
            ground_truth_same_organisation: true,
            disclaimer_text: crate::compliance::DEFAULT_DISCLAIMER.into(),
            bias_min_group_n: crate::bias::DEFAULT_MIN_GROUP_N,
            usability_cadence_days: crate::usability::DEFAULT_CADENCE_DAYS,
            audit_segment_bytes: 8 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct State {
    iam: Iam,
    registry: Registry,
    profiles: std::collections::BTreeMap<String, MappingProfile>,
    compliance: Compliance,
    jobs: std::collections::BTreeMap<String, PredictionJob>,
    monitor: Monitor,
    bias: BiasStore,
    usability: Usability,
    reviews: Reviews,
}

impl State {
    fn new(config: &PlatformConfig) -> Self {
        Self {
            iam: Iam::new(config.iam),
            registry: Registry::default(),
            profiles: Default::default(),
            compliance: Compliance::new(&config.disclaimer_text),
            jobs: Default::default(),
            monitor: Monitor::default(),
            bias: BiasStore::default(),
            usability: Usability::new(chrono::TimeDelta::days(config.usability_cadence_days)),
            reviews: Reviews::default(),
        }
    }
}

pub(crate) struct Inner {
    state: State,
    audit: AuditLog,
    vault: PayloadVault,
}

impl Inner {
    fn record(&mut self, event: AuditEvent) -> Result<AuditRecord> {
        Ok(self.audit.append(event)?)
    }
}

pub struct Platform {
    config: PlatformConfig,
    clock: Arc<dyn Clock>,
    units: &'static UnitTable,
    factory: Arc<dyn AdapterFactory>,
    adapters: Mutex<HashMap<String, Arc<dyn ModelAdapter>>>,
    limiter: CallLimiter,
    data_dir: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("data_dir", &self.data_dir)
            .finish_non_exhaustive()
    }
}

const STATE_FILE: &str = "state.json";
const KEY_FILE: &str = "vault.key";

impl Platform {
    pub fn in_memory(
        config: PlatformConfig,
        clock: Arc<dyn Clock>,
        factory: Arc<dyn AdapterFactory>,
    ) -> Self {
        let inner = Inner {
            state: State::new(&config),
            audit: AuditLog::in_memory(clock.clone()),
            vault: PayloadVault::in_memory(VaultKey::generate()),
        };
        Self::assemble(config, clock, factory, None, inner)
    }

    /// Open or create a data directory holding `state.json`, `vault.key`,
    /// `vault/` and `audit/`. A corrupt audit chain refuses to open.
    pub fn open(
        data_dir: impl AsRef<Path>,
        config: PlatformConfig,
        clock: Arc<dyn Clock>,
        factory: Arc<dyn AdapterFactory>,
    ) -> Result<Self> {
        let dir = data_dir.as_ref().to_path_buf();
        let io = |e: std::io::Error| PlatformError::internal(format!("{}: {e}", dir.display()));
        fs::create_dir_all(&dir).map_err(io)?;
        let key_path = dir.join(KEY_FILE);
        let key = if key_path.exists() {
            VaultKey::from_hex(fs::read_to_string(&key_path).map_err(io)?.trim())?
        } else {
            let k = VaultKey::generate();
            write_private(&key_path, k.to_hex().as_bytes()).map_err(io)?;
            k
        };
        let state_path = dir.join(STATE_FILE);
        let state = if state_path.exists() {
            let raw = fs::read(&state_path).map_err(io)?;
            serde_json::from_slice(&raw)
                .map_err(|e| PlatformError::internal(format!("{}: {e}", state_path.display())))?
        } else {
            State::new(&config)
        };
        let storage = SegmentedFileStorage::open(dir.join("audit"), config.audit_segment_bytes)
            .map_err(io)?;
        let audit = AuditLog::open(Box::new(storage), clock.clone())?;
        let vault = PayloadVault::in_dir(key, dir.join("vault"))?;
        let inner = Inner {
            state,
            audit,
            vault,
        };
        Ok(Self::assemble(config, clock, factory, Some(dir), inner))
    }

    fn assemble(
        config: PlatformConfig,
        clock: Arc<dyn Clock>,
        factory: Arc<dyn AdapterFactory>,
        data_dir: Option<PathBuf>,
        inner: Inner,
    ) -> Self {
        Self {
            limiter: CallLimiter::new(config.max_concurrent_calls.max(1)),
            config,
            clock,
            units: UnitTable::shipped(),
            factory,
            adapters: Mutex::new(HashMap::new()),
            data_dir,
            inner: Mutex::new(inner),
        }
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    fn now(&self) -> DateTime<Utc> {
        crate::clock::to_millis(self.clock.now())
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock()
    }

    /// Write state to disk (no-op in memory). Called after each mutation.
    fn persist(&self, inner: &Inner) -> Result<()> {
        let Some(dir) = &self.data_dir else {
            return Ok(());
        };
        let bytes =
            serde_json::to_vec(&inner.state).map_err(|e| PlatformError::internal(e.to_string()))?;
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        let io = |e: std::io::Error| PlatformError::internal(format!("persisting state: {e}"));
        write_private(&tmp, &bytes).map_err(io)?;
        fs::rename(&tmp, dir.join(STATE_FILE)).map_err(io)?;
        Ok(())
    }

    /// Authorize and, on denial, audit the attempt.
    fn authorize(&self, inner: &mut Inner, caller: Caller<'_>, action: Action) -> Result<Actor> {
        let token = match caller {
            Caller::System => return Ok(Actor::system()),
            Caller::Token(t) => t,
        };
        let now = self.now();
        match inner.state.iam.authorize(token, action, now) {
            Decision::Allow(acc) => Ok(Actor {
                user_id: acc.user_id,
                organisation: acc.organisation,
                role: Some(acc.role),
            }),
            Decision::Deny(reason) => {
                let user = inner
                    .state
                    .iam
                    .resolve(token, now)
                    .map(|a| a.user_id.clone())
                    .unwrap_or_else(|_| "anonymous".into());
                inner.record(
                    AuditEvent::new(user, AuditAction::AccessDenied).detail(json!({
                        "action": action,
                        "reason": reason,
                    })),
                )?;
                Err(PlatformError::from(&reason))
            }
        }
    }

    /// Object-level denial (e.g. someone else's job), audited like a role denial.
    fn deny(&self, inner: &mut Inner, actor: &Actor, action: Action, why: &str) -> PlatformError {
        let r = inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::AccessDenied).detail(json!({
                "action": action,
                "reason": why,
            })),
        );
        match r {
            Ok(_) => PlatformError::new(ErrorKind::Forbidden, why),
            Err(e) => e,
        }
    }

    fn adapter_for(&self, service_id: &str, endpoint: &str) -> Result<Arc<dyn ModelAdapter>> {
        let mut cache = self.adapters.lock();
        if let Some(a) = cache.get(service_id) {
            return Ok(a.clone());
        }
        let a = self
            .factory
            .adapter(endpoint, self.config.adapter_timeout)
            .map_err(|e| PlatformError::new(ErrorKind::Upstream, e))?;
        cache.insert(service_id.to_string(), a.clone());
        Ok(a)
    }

    /// Every audit record, for verification tooling and tests.
    pub fn audit_records(&self) -> Vec<AuditRecord> {
        self.lock().audit.records().to_vec()
    }

    /// Decrypt a stored execution payload.
    pub fn load_payload(&self, reference: &str) -> Result<serde_json::Value> {
        Ok(self.lock().vault.load(reference)?)
    }

    /// Whether any account exists (bootstrap check).
    pub fn has_users(&self) -> bool {
        !self.lock().state.iam.is_empty()
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

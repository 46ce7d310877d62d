//! Tamper-evident, append-only chronological record of every action.
//!
//! Each [`AuditRecord`] carries the digest of its predecessor. The digest of a
//! record covers the canonical JSON of all of its fields except `record_hash`
//! itself, so editing any byte of a stored record breaks either its own digest
//! or the link from its successor. The storage layer only knows how to append
//! bytes and read them back; there is no update or delete path.
//!
//! Case inputs and model outputs never enter the log in plaintext: records hold
//! their digests, and the payload itself goes to the encrypted [`PayloadVault`].

mod storage;
mod vault;

use std::ops::RangeInclusive;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Clock;
use crate::digest::{canonical_json, digest_str, zero_digest};

pub use storage::{AuditStorage, MemoryStorage, SegmentedFileStorage};
pub use vault::{PayloadVault, VaultError, VaultKey};

pub const SYSTEM_ACTOR: &str = "system";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit persistence failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit chain corrupt at seq {first_bad_seq}")]
    Corrupt { first_bad_seq: u64 },
}

/// Every auditable event across the platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    UserCreated,
    UserUpdated,
    LoginSucceeded,
    LoginFailed,
    Logout,
    AccessDenied,
    ServiceRegistered,
    PassportUpdated,
    ProfileConfigured,
    GovernanceConfigured,
    CertificationAdded,
    RegulationChecked,
    DisclaimerAcknowledged,
    CoverageReported,
    CaseIngested,
    QualityAssessed,
    JobCreated,
    JobConfirmed,
    JobConfirmRefused,
    JobExecuted,
    JobExecutionFailed,
    JobViewed,
    GroundTruthSubmitted,
    SnapshotComputed,
    DriftAlert,
    BiasLimitationsDeclared,
    BiasTestRun,
    UsabilityPromptIssued,
    UsabilityResponseSubmitted,
    UsabilityAggregated,
    ReviewSessionCreated,
    ReviewEstimateRecorded,
    ReviewSessionCompleted,
    AuditQueried,
    AuditExported,
}

impl AuditAction {
    pub const ALL: [AuditAction; 35] = [
        Self::UserCreated,
        Self::UserUpdated,
        Self::LoginSucceeded,
        Self::LoginFailed,
        Self::Logout,
        Self::AccessDenied,
        Self::ServiceRegistered,
        Self::PassportUpdated,
        Self::ProfileConfigured,
        Self::GovernanceConfigured,
        Self::CertificationAdded,
        Self::RegulationChecked,
        Self::DisclaimerAcknowledged,
        Self::CoverageReported,
        Self::CaseIngested,
        Self::QualityAssessed,
        Self::JobCreated,
        Self::JobConfirmed,
        Self::JobConfirmRefused,
        Self::JobExecuted,
        Self::JobExecutionFailed,
        Self::JobViewed,
        Self::GroundTruthSubmitted,
        Self::SnapshotComputed,
        Self::DriftAlert,
        Self::BiasLimitationsDeclared,
        Self::BiasTestRun,
        Self::UsabilityPromptIssued,
        Self::UsabilityResponseSubmitted,
        Self::UsabilityAggregated,
        Self::ReviewSessionCreated,
        Self::ReviewEstimateRecorded,
        Self::ReviewSessionCompleted,
        Self::AuditQueried,
        Self::AuditExported,
    ];

    pub fn name(self) -> String {
        match serde_json::to_value(self) {
            Ok(Value::String(s)) => s,
            _ => unreachable!("unit variants serialize as strings"),
        }
    }
}

/// What a caller hands to [`AuditLog::append`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEvent {
    pub user_id: String,
    pub action: AuditAction,
    pub service_id: Option<String>,
    pub passport_version: Option<u64>,
    pub input_hash: Option<String>,
    pub output_hash: Option<String>,
    pub detail: Value,
}

impl AuditEvent {
    pub fn new(user_id: impl Into<String>, action: AuditAction) -> Self {
        Self {
            user_id: user_id.into(),
            action,
            service_id: None,
            passport_version: None,
            input_hash: None,
            output_hash: None,
            detail: Value::Object(Default::default()),
        }
    }

    pub fn system(action: AuditAction) -> Self {
        Self::new(SYSTEM_ACTOR, action)
    }

    pub fn service(mut self, service_id: impl Into<String>) -> Self {
        self.service_id = Some(service_id.into());
        self
    }

    pub fn version(mut self, version: u64) -> Self {
        self.passport_version = Some(version);
        self
    }

    pub fn hashes(mut self, input: impl Into<String>, output: impl Into<String>) -> Self {
        self.input_hash = Some(input.into());
        self.output_hash = Some(output.into());
        self
    }

    pub fn input_hash(mut self, input: impl Into<String>) -> Self {
        self.input_hash = Some(input.into());
        self
    }

    pub fn detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    #[serde(with = "crate::timefmt::millis")]
    pub timestamp: DateTime<Utc>,
    pub user_id: String,
    pub action: AuditAction,
    pub service_id: Option<String>,
    pub passport_version: Option<u64>,
    pub input_hash: Option<String>,
    pub output_hash: Option<String>,
    pub detail: Value,
    pub prev_hash: String,
    pub record_hash: String,
}

#[derive(Serialize)]
struct HashedFields<'a> {
    seq: u64,
    #[serde(with = "crate::timefmt::millis")]
    timestamp: DateTime<Utc>,
    user_id: &'a str,
    action: AuditAction,
    service_id: &'a Option<String>,
    passport_version: Option<u64>,
    input_hash: &'a Option<String>,
    output_hash: &'a Option<String>,
    detail: &'a Value,
    prev_hash: &'a str,
}

impl AuditRecord {
    /// Digest over every field except `record_hash`.
    pub fn compute_hash(&self) -> String {
        digest_str(&canonical_json(&HashedFields {
            seq: self.seq,
            timestamp: self.timestamp,
            user_id: &self.user_id,
            action: self.action,
            service_id: &self.service_id,
            passport_version: self.passport_version,
            input_hash: &self.input_hash,
            output_hash: &self.output_hash,
            detail: &self.detail,
            prev_hash: &self.prev_hash,
        }))
    }

    /// The exact line stored and exported for this record.
    pub fn canonical_line(&self) -> String {
        canonical_json(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainStatus {
    Ok { records: u64 },
    Corrupt { first_bad_seq: u64 },
}

/// Verify a canonical export (one record per `\n`-terminated line).
///
/// With `range`, only records inside the range are checked; the record just
/// before the range anchors the first link.
pub fn verify_bytes(data: &[u8], range: Option<RangeInclusive<u64>>) -> ChainStatus {
    let lines = split_lines(data);
    let (start, end) = match &range {
        Some(r) => (*r.start().max(&1), *r.end()),
        None => (1, u64::MAX),
    };
    let mut prev = if start == 1 {
        zero_digest()
    } else {
        match lines
            .get((start - 2) as usize)
            .and_then(|l| serde_json::from_slice::<AuditRecord>(l).ok())
        {
            Some(anchor) => anchor.record_hash,
            None => {
                return ChainStatus::Corrupt {
                    first_bad_seq: start,
                }
            }
        }
    };
    let mut checked = 0;
    for (idx, line) in lines.iter().enumerate() {
        let expected = idx as u64 + 1;
        if expected < start {
            continue;
        }
        if expected > end {
            break;
        }
        let corrupt = ChainStatus::Corrupt {
            first_bad_seq: expected,
        };
        let Ok(record) = serde_json::from_slice::<AuditRecord>(line) else {
            return corrupt;
        };
        if record.canonical_line().as_bytes() != *line
            || record.seq != expected
            || record.prev_hash != prev
            || record.compute_hash() != record.record_hash
        {
            return corrupt;
        }
        prev = record.record_hash;
        checked += 1;
    }
    ChainStatus::Ok { records: checked }
}

/// Split into records. A trailing fragment without its terminator counts as a
/// (corrupt) record so truncation or a flipped final newline is detected.
fn split_lines(data: &[u8]) -> Vec<&[u8]> {
    if data.is_empty() {
        return Vec::new();
    }
    let mut lines: Vec<&[u8]> = data.split(|b| *b == b'\n').collect();
    if data.last() == Some(&b'\n') {
        lines.pop();
    } else if let Some(last) = lines.last_mut() {
        // no terminator: cannot be a well-formed record even if it parses
        if serde_json::from_slice::<AuditRecord>(last).is_ok() {
            *last = b"";
        }
    }
    lines
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditQuery {
    pub user: Option<String>,
    pub service: Option<String>,
    pub action: Option<AuditAction>,
    #[serde(default, with = "crate::timefmt::millis_opt")]
    pub from: Option<DateTime<Utc>>,
    #[serde(default, with = "crate::timefmt::millis_opt")]
    pub to: Option<DateTime<Utc>>,
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

impl AuditQuery {
    fn matches(&self, r: &AuditRecord) -> bool {
        self.user.as_ref().is_none_or(|u| &r.user_id == u)
            && self
                .service
                .as_ref()
                .is_none_or(|s| r.service_id.as_ref() == Some(s))
            && self.action.is_none_or(|a| r.action == a)
            && self.from.is_none_or(|f| r.timestamp >= f)
            && self.to.is_none_or(|t| r.timestamp <= t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditPage {
    pub records: Vec<AuditRecord>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

pub const DEFAULT_PAGE_LIMIT: usize = 100;

/// Single-writer log. Callers serialize access (the platform holds it behind a mutex).
pub struct AuditLog {
    storage: Box<dyn AuditStorage>,
    records: Vec<AuditRecord>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("records", &self.records.len())
            .finish()
    }
}

impl AuditLog {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            storage: Box::new(MemoryStorage::default()),
            records: Vec::new(),
            clock,
        }
    }

    /// Load and verify existing content. A corrupt log refuses to open for writing.
    pub fn open(storage: Box<dyn AuditStorage>, clock: Arc<dyn Clock>) -> Result<Self, AuditError> {
        let data = storage.read_all()?;
        if let ChainStatus::Corrupt { first_bad_seq } = verify_bytes(&data, None) {
            return Err(AuditError::Corrupt { first_bad_seq });
        }
        let records = split_lines(&data)
            .into_iter()
            .map(|l| serde_json::from_slice(l).expect("verified above"))
            .collect();
        Ok(Self {
            storage,
            records,
            clock,
        })
    }

    /// Write-ahead append: the record is durable before this returns `Ok`.
    pub fn append(&mut self, event: AuditEvent) -> Result<AuditRecord, AuditError> {
        let prev_hash = self
            .records
            .last()
            .map(|r| r.record_hash.clone())
            .unwrap_or_else(zero_digest);
        let mut record = AuditRecord {
            seq: self.records.len() as u64 + 1,
            timestamp: crate::clock::to_millis(self.clock.now()),
            user_id: event.user_id,
            action: event.action,
            service_id: event.service_id,
            passport_version: event.passport_version,
            input_hash: event.input_hash,
            output_hash: event.output_hash,
            detail: event.detail,
            prev_hash,
            record_hash: String::new(),
        };
        record.record_hash = record.compute_hash();
        self.storage
            .append_line(record.seq, &record.canonical_line())?;
        self.records.push(record.clone());
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    /// Recompute every link from what is actually persisted.
    pub fn verify_chain(
        &self,
        range: Option<RangeInclusive<u64>>,
    ) -> Result<ChainStatus, AuditError> {
        Ok(verify_bytes(&self.storage.read_all()?, range))
    }

    pub fn query(&self, q: &AuditQuery) -> AuditPage {
        let limit = q.limit.unwrap_or(DEFAULT_PAGE_LIMIT);
        let matching: Vec<&AuditRecord> = self.records.iter().filter(|r| q.matches(r)).collect();
        AuditPage {
            total: matching.len(),
            records: matching
                .into_iter()
                .skip(q.offset)
                .take(limit)
                .cloned()
                .collect(),
            offset: q.offset,
            limit,
        }
    }

    /// Canonical lines for the range, bit-identical to storage.
    pub fn export(&self, range: Option<RangeInclusive<u64>>) -> String {
        let mut out = String::new();
        for r in &self.records {
            if range.as_ref().is_none_or(|rg| rg.contains(&r.seq)) {
                out.push_str(&r.canonical_line());
                out.push('\n');
            }
        }
        out
    }
}

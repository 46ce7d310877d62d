use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::jobs::NewJob;
use super::pipeline::{prepare_dataset, CaseContext};
use super::{Actor, Caller, ErrorKind, Platform, PlatformError, Result};
use crate::audit::{AuditAction, AuditEvent, AuditPage, AuditQuery, ChainStatus};
use crate::compliance::{
    coverage_report, enabled_requirements, CertificationRecord, CoverageReport,
    DisclaimerAcknowledgement, Evidence, Mode, NewCertification, RegulationDecision, Requirement,
};
use crate::digest::{digest_json, digest_str};
use crate::gateway::PredictionJob;
use crate::iam::{Action, NewAccount, Session, UserAccount};
use crate::interop::{
    ingest_dataset, CaseFormat, ConversionFailure, IdentifierPolicy, MappingProfile,
};
use crate::quality::{default_rules, QualityReport};
use crate::registry::{AiPassport, ServiceListing};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernanceUpdate {
    /// Requirements the operator switches off for this service.
    #[serde(default)]
    pub disabled_requirements: Option<BTreeSet<Requirement>>,
    /// Replaces the platform-wide disclaimer text. Existing acknowledgements
    /// of the old text stop counting.
    #[serde(default)]
    pub disclaimer_text: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckRequest {
    /// The text the user was shown; must match the configured one.
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisclaimerView {
    pub service_id: String,
    pub text: String,
    pub text_hash: String,
    /// No valid certification for clinical use here: the banner must show.
    pub banner_required: bool,
    pub acknowledged: Option<DisclaimerAcknowledgement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityCaseRequest {
    pub service_id: String,
    #[serde(default = "flat")]
    pub format: CaseFormat,
    pub case: Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityDatasetRequest {
    pub service_id: String,
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default = "flat")]
    pub format: CaseFormat,
    pub cases: Vec<Json>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub service_id: String,
    #[serde(default = "flat")]
    pub format: CaseFormat,
    pub case: Json,
    #[serde(default = "yes")]
    pub dry_run: bool,
    /// Needed when `dry_run` is false: the draft job's mode.
    #[serde(default)]
    pub mode: Option<Mode>,
}

fn flat() -> CaseFormat {
    CaseFormat::Flat
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum IngestResult {
    DryRun {
        case: crate::interop::ClinicalCase,
        unrecognized: Vec<String>,
        conversion_failures: Vec<ConversionFailure>,
        quality: QualityReport,
    },
    Job {
        job: Box<PredictionJob>,
    },
}

impl Platform {
    pub fn login(&self, user_id: &str, secret: &str) -> Result<Session> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let mut iam = inner.state.iam.clone();
        match iam.authenticate(user_id, secret, self.now()) {
            Ok(session) => {
                inner.record(
                    AuditEvent::new(user_id, AuditAction::LoginSucceeded).detail(json!({
                        "session": digest_str(&session.token),
                        "expires_at": crate::timefmt::format_millis(&session.expires_at),
                    })),
                )?;
                inner.state.iam = iam;
                self.persist(inner)?;
                Ok(session)
            }
            Err(e) => {
                inner.record(
                    AuditEvent::new(user_id, AuditAction::LoginFailed)
                        .detail(json!({ "error": e.to_string() })),
                )?;
                Err(PlatformError::new(
                    ErrorKind::Unauthenticated,
                    "invalid credentials",
                ))
            }
        }
    }

    pub fn logout(&self, token: &str) -> Result<()> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let user = inner
            .state
            .iam
            .resolve(token, self.now())
            .map(|a| a.user_id.clone())
            .map_err(|r| PlatformError::from(&r))?;
        inner.record(AuditEvent::new(&user, AuditAction::Logout))?;
        inner.state.iam.logout(token);
        self.persist(inner)
    }

    /// The caller's account.
    pub fn whoami(&self, caller: Caller<'_>) -> Result<Actor> {
        let guard = self.lock();
        match caller {
            Caller::System => Ok(Actor::system()),
            Caller::Token(t) => {
                let a = guard
                    .state
                    .iam
                    .resolve(t, self.now())
                    .map_err(|r| PlatformError::from(&r))?;
                Ok(Actor {
                    user_id: a.user_id.clone(),
                    organisation: a.organisation.clone(),
                    role: Some(a.role),
                })
            }
        }
    }

    pub fn create_user(&self, caller: Caller<'_>, new: NewAccount) -> Result<UserAccount> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ManageUsers)?;
        let mut iam = inner.state.iam.clone();
        let account = iam.create_user(new)?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::UserCreated).detail(json!({
                "user_id": account.user_id,
                "role": account.role,
                "organisation": account.organisation,
            })),
        )?;
        inner.state.iam = iam;
        self.persist(inner)?;
        Ok(account)
    }

    pub fn set_user_active(
        &self,
        caller: Caller<'_>,
        user_id: &str,
        active: bool,
    ) -> Result<UserAccount> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ManageUsers)?;
        let mut iam = inner.state.iam.clone();
        let account = iam.set_active(user_id, active)?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::UserUpdated)
                .detail(json!({ "user_id": user_id, "active": active })),
        )?;
        inner.state.iam = iam;
        self.persist(inner)?;
        Ok(account)
    }

    pub fn users(&self, caller: Caller<'_>) -> Result<Vec<UserAccount>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.authorize(inner, caller, Action::ManageUsers)?;
        Ok(inner.state.iam.accounts().cloned().collect())
    }

    pub fn register_service(
        &self,
        caller: Caller<'_>,
        passport: AiPassport,
        endpoint: &str,
    ) -> Result<AiPassport> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::RegisterService)?;
        let entry =
            inner
                .state
                .registry
                .preview_register(passport, endpoint, self.units, self.now())?;
        self.factory
            .adapter(endpoint, self.config.adapter_timeout)
            .map_err(PlatformError::invalid)?;
        let p = entry.latest().clone();
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::ServiceRegistered)
                .service(&p.service_id)
                .version(p.version)
                .detail(json!({ "endpoint": endpoint, "passport_digest": digest_json(&p) })),
        )?;
        inner.state.registry.insert_entry(entry)?;
        self.adapters.lock().remove(&p.service_id);
        self.persist(inner)?;
        Ok(p)
    }

    pub fn services(&self, caller: Caller<'_>) -> Result<Vec<ServiceListing>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.authorize(inner, caller, Action::ReadPassport)?;
        Ok(inner.state.registry.list())
    }

    pub fn passport(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        version: Option<u64>,
    ) -> Result<AiPassport> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.authorize(inner, caller, Action::ReadPassport)?;
        Ok(inner.state.registry.get(service_id, version)?.clone())
    }

    pub fn profile(&self, caller: Caller<'_>, service_id: &str) -> Result<MappingProfile> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.authorize(inner, caller, Action::ReadPassport)?;
        let p = inner.state.registry.get(service_id, None)?.clone();
        Ok(Self::profile_for(inner, &p))
    }

    /// Replace the mapping profile of a service.
    pub fn configure_profile(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        mut profile: MappingProfile,
    ) -> Result<MappingProfile> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ConfigureGovernance)?;
        let passport = inner.state.registry.get(service_id, None)?.clone();
        if profile.service_id.is_empty() {
            profile.service_id = service_id.to_string();
        }
        if profile.service_id != service_id {
            return Err(PlatformError::invalid("profile names a different service"));
        }
        let missing = profile.missing_required(&passport.input_schema);
        if !missing.is_empty() {
            return Err(
                PlatformError::invalid("profile leaves required inputs unmapped")
                    .with_detail(missing),
            );
        }
        if let Some(e) = profile
            .entries
            .values()
            .find(|e| passport.input(&e.variable).is_none())
        {
            return Err(PlatformError::invalid(format!(
                "`{}` is not an input of this service",
                e.variable
            )));
        }
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::ProfileConfigured)
                .service(service_id)
                .detail(json!({ "profile_digest": digest_json(&profile), "entries": profile.entries.len() })),
        )?;
        inner
            .state
            .profiles
            .insert(service_id.to_string(), profile.clone());
        self.persist(inner)?;
        Ok(profile)
    }

    pub fn configure_governance(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        update: GovernanceUpdate,
    ) -> Result<CoverageReport> {
        {
            let mut guard = self.lock();
            let inner = &mut *guard;
            let actor = self.authorize(inner, caller, Action::ConfigureGovernance)?;
            inner.state.registry.entry(service_id)?;
            if update
                .disclaimer_text
                .as_ref()
                .is_some_and(|t| t.trim().is_empty())
            {
                return Err(PlatformError::invalid("disclaimer text must not be empty"));
            }
            inner.record(
                AuditEvent::new(&actor.user_id, AuditAction::GovernanceConfigured)
                    .service(service_id)
                    .detail(json!({
                        "disabled_requirements": update.disabled_requirements,
                        "disclaimer_text": update.disclaimer_text,
                    })),
            )?;
            if let Some(d) = update.disabled_requirements {
                inner.state.compliance.set_disabled(service_id, d);
            }
            if let Some(t) = update.disclaimer_text {
                inner.state.compliance.set_disclaimer_text(&t);
            }
            self.persist(inner)?;
        }
        self.coverage(caller, service_id)
    }

    pub fn add_certification(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        new: NewCertification,
    ) -> Result<CertificationRecord> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ManageCertifications)?;
        inner.state.registry.entry(service_id)?;
        let mut compliance = inner.state.compliance.clone();
        let record = compliance.add_certification(service_id, crate::ids::new_id("cert"), new)?;
        let next = inner
            .state
            .registry
            .preview_update(service_id, self.units, |p| {
                p.certification_refs.push(record.record_id.clone());
                Ok(())
            })?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::CertificationAdded)
                .service(service_id)
                .version(next.version)
                .detail(json!({ "record": record })),
        )?;
        inner.state.compliance = compliance;
        inner.state.registry.commit(next)?;
        self.persist(inner)?;
        Ok(record)
    }

    pub fn certifications(
        &self,
        caller: Caller<'_>,
        service_id: &str,
    ) -> Result<Vec<CertificationRecord>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.authorize(inner, caller, Action::ReadPassport)?;
        inner.state.registry.entry(service_id)?;
        Ok(inner.state.compliance.certifications(service_id).to_vec())
    }

    pub fn regulation(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        jurisdiction: Option<&str>,
        mode: Mode,
    ) -> Result<RegulationDecision> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ReadPassport)?;
        inner.state.registry.entry(service_id)?;
        let j = jurisdiction
            .unwrap_or(&self.config.jurisdiction)
            .to_ascii_uppercase();
        let decision = inner
            .state
            .compliance
            .check(service_id, &j, mode, self.now().date_naive());
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::RegulationChecked)
                .service(service_id)
                .detail(json!({ "decision": decision })),
        )?;
        Ok(decision)
    }

    pub fn disclaimer(&self, caller: Caller<'_>, service_id: &str) -> Result<DisclaimerView> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ReadPassport)?;
        inner.state.registry.entry(service_id)?;
        let c = &inner.state.compliance;
        let decision = c.check(
            service_id,
            &self.config.jurisdiction,
            Mode::Clinical,
            self.now().date_naive(),
        );
        Ok(DisclaimerView {
            service_id: service_id.to_string(),
            text: c.disclaimer_text().to_string(),
            text_hash: c.disclaimer_hash(),
            banner_required: !decision.allowed,
            acknowledged: c.current_ack(&actor.user_id, service_id).cloned(),
        })
    }

    pub fn acknowledge_disclaimer(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        req: AckRequest,
    ) -> Result<DisclaimerAcknowledgement> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::AcknowledgeDisclaimer)?;
        inner.state.registry.entry(service_id)?;
        let current = inner.state.compliance.disclaimer_text().to_string();
        if req.text.as_ref().is_some_and(|t| *t != current) {
            return Err(PlatformError::invalid(
                "acknowledged text differs from the configured disclaimer",
            ));
        }
        let ack_id = crate::ids::new_id("ack");
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::DisclaimerAcknowledged)
                .service(service_id)
                .detail(json!({ "ack_id": ack_id, "text_hash": digest_str(&current) })),
        )?;
        let ack = inner.state.compliance.acknowledge(
            ack_id,
            &actor.user_id,
            service_id,
            &current,
            self.now(),
        );
        self.persist(inner)?;
        Ok(ack)
    }

    fn evidence(&self, inner: &super::Inner, service_id: &str) -> Result<Evidence> {
        let s = &inner.state;
        let chain = inner.audit.verify_chain(None)?;
        Ok(Evidence {
            passport_registered: s.registry.contains(service_id),
            access_control: true,
            has_certification: true,
            disclaimer_flow: true,
            quality_gate: true,
            confirmation_step: true,
            has_performance_snapshot: !s.monitor.snapshots(service_id).is_empty(),
            audit_chain_intact: matches!(chain, ChainStatus::Ok { .. }),
            has_usability_evaluation: !s.usability.scores(service_id).is_empty(),
            has_review_session: s.reviews.sessions(service_id).next().is_some(),
            has_bias_evaluation: !s.bias.reports(service_id).is_empty(),
            attributions: true,
            transport_encrypted: self.config.transport_encrypted,
            unit_mapping: true,
        })
    }

    pub fn coverage(&self, caller: Caller<'_>, service_id: &str) -> Result<CoverageReport> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ReadCoverage)?;
        inner.state.registry.entry(service_id)?;
        let evidence = self.evidence(inner, service_id)?;
        let enabled = enabled_requirements(&evidence, &inner.state.compliance.disabled(service_id));
        let report = coverage_report(service_id, &enabled);
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::CoverageReported)
                .service(service_id)
                .detail(json!({
                    "enabled": report.enabled,
                    "uncovered": report.risks.iter().filter(|r| !r.covered).map(|r| r.risk_id).collect::<Vec<_>>(),
                })),
        )?;
        Ok(report)
    }

    pub fn quality_case(
        &self,
        caller: Caller<'_>,
        req: QualityCaseRequest,
    ) -> Result<QualityReport> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::AssessQuality)?;
        let passport = inner.state.registry.get(&req.service_id, None)?.clone();
        let p = self.ingest_audited(inner, &actor, &passport, &req.case, req.format, true)?;
        Ok(p.quality)
    }

    pub fn quality_dataset(
        &self,
        caller: Caller<'_>,
        req: QualityDatasetRequest,
    ) -> Result<QualityReport> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::AssessQuality)?;
        let passport = inner.state.registry.get(&req.service_id, None)?.clone();
        let dataset_id = req
            .dataset_id
            .clone()
            .unwrap_or_else(|| crate::ids::new_id("dataset"));
        let doc = Json::Array(req.cases).to_string();
        let raws = ingest_dataset(&doc, req.format, &IdentifierPolicy::default(), self.now())?;
        let profile = Self::profile_for(inner, &passport);
        let rules = default_rules();
        let ctx = CaseContext {
            schema: &passport.input_schema,
            declared: &passport.declared_quality,
            profile: &profile,
            units: self.units,
            rules: &rules,
        };
        let report = prepare_dataset(&dataset_id, &raws, &ctx)
            .map_err(|e| PlatformError::invalid(e.to_string()))?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::QualityAssessed)
                .service(&passport.service_id)
                .version(passport.version)
                .detail(json!({
                    "target": dataset_id,
                    "cases": raws.len(),
                    "verdict": report.verdict,
                    "overall": report.overall,
                    "hard_failures": report.hard_failures.len(),
                })),
        )?;
        Ok(report)
    }

    /// Dry run returns the normalized case and its quality report; otherwise
    /// a draft job is created.
    pub fn ingest(&self, caller: Caller<'_>, req: IngestRequest) -> Result<IngestResult> {
        if !req.dry_run {
            let mode = req.mode.ok_or_else(|| {
                PlatformError::invalid("`mode` is required unless dry_run is set")
            })?;
            let job = self.create_job(
                caller,
                NewJob {
                    service_id: req.service_id,
                    mode,
                    format: req.format,
                    case: req.case,
                    care_context: None,
                },
            )?;
            return Ok(IngestResult::Job { job: Box::new(job) });
        }
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::IngestCase)?;
        let passport = inner.state.registry.get(&req.service_id, None)?.clone();
        let p = self.ingest_audited(inner, &actor, &passport, &req.case, req.format, true)?;
        Ok(IngestResult::DryRun {
            case: p.case,
            unrecognized: p.unrecognized,
            conversion_failures: p.conversion_failures,
            quality: p.quality,
        })
    }

    pub fn audit_query(&self, caller: Caller<'_>, q: AuditQuery) -> Result<AuditPage> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ReadAudit)?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::AuditQueried)
                .detail(json!({ "query": q })),
        )?;
        Ok(inner.audit.query(&q))
    }

    /// Canonical lines, bit-identical to what is stored.
    pub fn audit_export(
        &self,
        caller: Caller<'_>,
        range: Option<RangeInclusive<u64>>,
    ) -> Result<String> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ExportAudit)?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::AuditExported).detail(json!({
                "from": range.as_ref().map(|r| *r.start()),
                "to": range.as_ref().map(|r| *r.end()),
            })),
        )?;
        Ok(inner.audit.export(range))
    }

    pub fn audit_verify(
        &self,
        caller: Caller<'_>,
        range: Option<RangeInclusive<u64>>,
    ) -> Result<ChainStatus> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ReadAudit)?;
        let status = inner.audit.verify_chain(range.clone())?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::AuditQueried).detail(json!({
                "verify": true,
                "from": range.as_ref().map(|r| *r.start()),
                "to": range.as_ref().map(|r| *r.end()),
                "status": status,
            })),
        )?;
        Ok(status)
    }
}

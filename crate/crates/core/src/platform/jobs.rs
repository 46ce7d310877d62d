use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::pipeline::{prepare_case, CaseContext, PipelineError, PreparedCase};
use super::{Actor, Caller, ErrorKind, Inner, Platform, PlatformError, Result};
use crate::audit::{AuditAction, AuditEvent};
use crate::bias::missing_attribute_note;
use crate::compliance::Mode;
use crate::digest::digest_json;
use crate::gateway::{
    attribute_outputs, call_with_retry, retries_for, validate_outputs, AdapterRequest,
    AdapterResponse, Confirmation, DraftInfo, Execution, JobState, Limited, PredictionJob,
    Transition,
};
use crate::iam::{Action, Role};
use crate::interop::{ingest_case, CaseFormat, ClinicalCase, IdentifierPolicy, MappingProfile};
use crate::monitor::{GroundTruthRecord, OutcomeInput};
use crate::quality::default_rules;
use crate::registry::{AiPassport, IntendedContext};
use crate::xai::default_baseline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewJob {
    pub service_id: String,
    pub mode: Mode,
    #[serde(default = "flat")]
    pub format: CaseFormat,
    /// The external case document.
    pub case: Json,
    /// Where the case comes from; compared with the passport's intended context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub care_context: Option<IntendedContext>,
}

fn flat() -> CaseFormat {
    CaseFormat::Flat
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfirmRequest {
    /// Hash of the limitations the user was shown; refused when stale.
    #[serde(default)]
    pub limitations_hash: Option<String>,
}

/// Limitations shown at the double-check: declared ones plus a note for
/// each attribute known to be absent from the training data.
pub(super) fn limitations(p: &AiPassport) -> Vec<String> {
    let mut out = p.declared_limitations.clone();
    for attr in &p.training_descriptor.known_absent_attributes {
        let note = missing_attribute_note(attr);
        if !out.contains(&note) {
            out.push(note);
        }
    }
    out
}

fn context_label(c: IntendedContext) -> &'static str {
    match c {
        IntendedContext::Inpatient => "inpatient",
        IntendedContext::Outpatient => "outpatient",
        IntendedContext::PrimaryCare => "primary_care",
        IntendedContext::Academic => "academic",
    }
}

impl Platform {
    pub(super) fn profile_for(inner: &Inner, passport: &AiPassport) -> MappingProfile {
        inner
            .state
            .profiles
            .get(&passport.service_id)
            .cloned()
            .unwrap_or_else(|| {
                MappingProfile::identity(&passport.service_id, &passport.input_schema)
            })
    }

    /// Parse, map, normalize and assess. Audits ingestion, and ingestion failures.
    pub(super) fn ingest_audited(
        &self,
        inner: &mut Inner,
        actor: &Actor,
        passport: &AiPassport,
        document: &Json,
        format: CaseFormat,
        dry_run: bool,
    ) -> Result<PreparedCase> {
        let now = self.now();
        let profile = Self::profile_for(inner, passport);
        let rules = default_rules();
        let ctx = CaseContext {
            schema: &passport.input_schema,
            declared: &passport.declared_quality,
            profile: &profile,
            units: self.units,
            rules: &rules,
        };
        let prepared = ingest_case(
            &document.to_string(),
            format,
            &IdentifierPolicy::default(),
            now,
        )
        .map_err(PipelineError::from)
        .and_then(|raw| prepare_case(&raw, &ctx));
        let base = AuditEvent::new(&actor.user_id, AuditAction::CaseIngested)
            .service(&passport.service_id)
            .version(passport.version);
        match prepared {
            Err(e) => {
                inner.record(base.detail(json!({ "ok": false, "format": format, "dry_run": dry_run, "error": e.to_string() })))?;
                Err(PlatformError::invalid(e.to_string()))
            }
            Ok(p) => {
                inner.record(base.input_hash(digest_json(&p.case)).detail(json!({
                    "ok": true,
                    "case_id": p.case.case_id,
                    "format": format,
                    "dry_run": dry_run,
                    "unrecognized": p.unrecognized,
                    "conversions": p.case.provenance,
                })))?;
                inner.record(
                    AuditEvent::new(&actor.user_id, AuditAction::QualityAssessed)
                        .service(&passport.service_id)
                        .version(passport.version)
                        .input_hash(digest_json(&p.case))
                        .detail(json!({
                            "target": p.quality.target,
                            "verdict": p.quality.verdict,
                            "overall": p.quality.overall,
                            "hard_failures": p.quality.hard_failures.len(),
                        })),
                )?;
                Ok(p)
            }
        }
    }

    pub fn create_job(&self, caller: Caller<'_>, new: NewJob) -> Result<PredictionJob> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let action = match new.mode {
            Mode::Clinical => Action::SubmitPrediction,
            Mode::Academic => Action::SubmitAcademicPrediction,
        };
        let actor = self.authorize(inner, caller, action)?;
        let passport = inner.state.registry.get(&new.service_id, None)?.clone();
        let prepared =
            self.ingest_audited(inner, &actor, &passport, &new.case, new.format, false)?;
        let now = self.now();
        let today = now.date_naive();
        let regulation = inner.state.compliance.check(
            &passport.service_id,
            &self.config.jurisdiction,
            new.mode,
            today,
        );

        let mut warnings = Vec::new();
        if let Some(ctx) = new.care_context {
            if ctx != passport.intended_context {
                warnings.push(format!(
                    "care context {} differs from the intended context {} of this service",
                    context_label(ctx),
                    context_label(passport.intended_context)
                ));
            }
        }
        if prepared.quality.verdict == crate::quality::Verdict::Block {
            warnings.push(format!(
                "the predictive process is stopped: {} hard quality failure(s)",
                prepared.quality.hard_failures.len()
            ));
        }
        if !prepared.unrecognized.is_empty() {
            warnings.push(format!(
                "unrecognized input(s) ignored: {}",
                prepared.unrecognized.join(", ")
            ));
        }
        if new.mode == Mode::Clinical && !regulation.allowed {
            warnings.push(format!(
                "clinical use not permitted: {}",
                regulation.reasons.join("; ")
            ));
        }
        let draft = DraftInfo {
            passport: passport.summary(),
            limitations: limitations(&passport),
            warnings,
            disclaimer: (new.mode == Mode::Academic)
                .then(|| inner.state.compliance.disclaimer_text().to_string()),
            regulation: Some(regulation),
            unrecognized_variables: prepared.unrecognized.clone(),
        };
        let job = PredictionJob {
            job_id: crate::ids::new_id("job"),
            user_id: actor.user_id.clone(),
            organisation: actor.organisation.clone(),
            service_id: passport.service_id.clone(),
            passport_version: passport.version,
            mode: new.mode,
            care_context: new.care_context,
            case_hash: digest_json(&prepared.case),
            case: prepared.case,
            quality: prepared.quality,
            draft,
            state: JobState::Draft,
            transitions: vec![Transition {
                state: JobState::Draft,
                at: now,
            }],
            confirmation: None,
            outputs: BTreeMap::new(),
            execution: None,
            attributions: Vec::new(),
            ground_truth_ref: None,
            failed_attempts: 0,
            flagged_for_auditor: false,
            executing: false,
        };
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::JobCreated)
                .service(&job.service_id)
                .version(job.passport_version)
                .input_hash(&job.case_hash)
                .detail(json!({
                    "job_id": job.job_id,
                    "mode": job.mode,
                    "state": job.state,
                    "blocked": job.blocked(),
                    "warnings": job.draft.warnings,
                })),
        )?;
        inner.state.jobs.insert(job.job_id.clone(), job.clone());
        self.persist(inner)?;
        Ok(job)
    }

    fn job_for_owner(
        &self,
        inner: &mut Inner,
        actor: &Actor,
        job_id: &str,
        action: Action,
    ) -> Result<PredictionJob> {
        let job = inner
            .state
            .jobs
            .get(job_id)
            .cloned()
            .ok_or_else(|| PlatformError::not_found(format!("job `{job_id}`")))?;
        if !actor.is_system() && job.user_id != actor.user_id {
            return Err(self.deny(inner, actor, action, "only the job's creator may do this"));
        }
        Ok(job)
    }

    fn refuse(
        &self,
        inner: &mut Inner,
        actor: &Actor,
        job: &PredictionJob,
        reason: &str,
        err: PlatformError,
    ) -> PlatformError {
        let r = inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::JobConfirmRefused)
                .service(&job.service_id)
                .version(job.passport_version)
                .detail(json!({ "job_id": job.job_id, "reason": reason, "message": err.message })),
        );
        match r {
            Ok(_) => err,
            Err(e) => e,
        }
    }

    /// The clinicians double-check.
    pub fn confirm_job(
        &self,
        caller: Caller<'_>,
        job_id: &str,
        req: ConfirmRequest,
    ) -> Result<PredictionJob> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ConfirmJob)?;
        let job = self.job_for_owner(inner, &actor, job_id, Action::ConfirmJob)?;
        if job.state != JobState::Draft {
            return Err(PlatformError::new(
                ErrorKind::State,
                format!("job is {}; only draft jobs can be confirmed", job.state),
            ));
        }
        if job.blocked() {
            let err = PlatformError::refused(
                "the predictive process is stopped: quality gate blocked this case",
            )
            .with_detail(&job.quality);
            return Err(self.refuse(inner, &actor, &job, "quality", err));
        }
        let limitations_hash = digest_json(&job.draft.limitations);
        if req
            .limitations_hash
            .as_ref()
            .is_some_and(|h| *h != limitations_hash)
        {
            let err = PlatformError::refused(
                "the limitations shown are not the ones on record; reload the job",
            );
            return Err(self.refuse(inner, &actor, &job, "stale_limitations", err));
        }
        let mut certification_record = None;
        let mut disclaimer_ack = None;
        match job.mode {
            Mode::Clinical => {
                let decision = inner.state.compliance.check(
                    &job.service_id,
                    &self.config.jurisdiction,
                    Mode::Clinical,
                    self.now().date_naive(),
                );
                inner.record(
                    AuditEvent::new(&actor.user_id, AuditAction::RegulationChecked)
                        .service(&job.service_id)
                        .version(job.passport_version)
                        .detail(json!({ "job_id": job.job_id, "decision": decision })),
                )?;
                if !decision.allowed {
                    let err = PlatformError::refused(format!(
                        "clinical use not permitted: {}",
                        decision.reasons.join("; ")
                    ))
                    .with_detail(&decision);
                    return Err(self.refuse(inner, &actor, &job, "regulation", err));
                }
                certification_record = decision.matched_record;
            }
            Mode::Academic => match inner
                .state
                .compliance
                .current_ack(&actor.user_id, &job.service_id)
            {
                Some(ack) => disclaimer_ack = Some(ack.ack_id.clone()),
                None => {
                    let err = PlatformError::refused(
                        "academic use requires acknowledging the disclaimer for this service first",
                    )
                    .with_detail(json!({ "disclaimer": inner.state.compliance.disclaimer_text() }));
                    return Err(self.refuse(inner, &actor, &job, "disclaimer", err));
                }
            },
        }
        let now = self.now();
        let confirmation = Confirmation {
            at: now,
            passport_version: job.passport_version,
            limitations_hash,
            certification_record,
            disclaimer_ack,
        };
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::JobConfirmed)
                .service(&job.service_id)
                .version(job.passport_version)
                .input_hash(&job.case_hash)
                .detail(json!({ "job_id": job.job_id, "confirmation": confirmation })),
        )?;
        let stored = inner.state.jobs.get_mut(job_id).expect("looked up above");
        stored.advance(JobState::Confirmed, now)?;
        stored.confirmation = Some(confirmation);
        let out = stored.clone();
        self.persist(inner)?;
        Ok(out)
    }

    pub fn execute_job(&self, caller: Caller<'_>, job_id: &str) -> Result<PredictionJob> {
        let (actor, job, passport, adapter) = {
            let mut guard = self.lock();
            let inner = &mut *guard;
            let actor = self.authorize(inner, caller, Action::ExecuteJob)?;
            let job = self.job_for_owner(inner, &actor, job_id, Action::ExecuteJob)?;
            if job.state != JobState::Confirmed {
                return Err(PlatformError::new(
                    ErrorKind::State,
                    format!("job is {}; only confirmed jobs can be executed", job.state),
                ));
            }
            if job.executing {
                return Err(PlatformError::new(
                    ErrorKind::Conflict,
                    "execution already in progress",
                ));
            }
            let passport = inner
                .state
                .registry
                .get(&job.service_id, Some(job.passport_version))?
                .clone();
            if job.mode == Mode::Clinical {
                let decision = inner.state.compliance.check(
                    &job.service_id,
                    &self.config.jurisdiction,
                    Mode::Clinical,
                    self.now().date_naive(),
                );
                if !decision.allowed {
                    inner.record(
                        AuditEvent::new(&actor.user_id, AuditAction::JobExecutionFailed)
                            .service(&job.service_id)
                            .version(job.passport_version)
                            .detail(json!({ "job_id": job.job_id, "reason": "regulation", "decision": decision })),
                    )?;
                    return Err(PlatformError::refused(format!(
                        "clinical use no longer permitted: {}",
                        decision.reasons.join("; ")
                    )));
                }
            }
            let endpoint = inner
                .state
                .registry
                .entry(&job.service_id)?
                .endpoint
                .clone();
            let adapter = self.adapter_for(&job.service_id, &endpoint)?;
            inner
                .state
                .jobs
                .get_mut(job_id)
                .expect("looked up")
                .executing = true;
            (actor, job, passport, adapter)
        };

        let inputs = job.case.inputs();
        let request = AdapterRequest {
            inputs: inputs.clone(),
            passport_version: job.passport_version,
        };
        let limited = Limited {
            inner: adapter.as_ref(),
            limiter: &self.limiter,
        };
        enum Outcome {
            Adapter(String),
            Schema(Vec<crate::gateway::OutputViolation>),
            Attribution(String),
            Done(AdapterResponse, Vec<crate::xai::Attribution>),
        }
        let outcome = match call_with_retry(&limited, &request, retries_for(job.mode)) {
            Err(e) => Outcome::Adapter(e.to_string()),
            Ok(resp) => {
                let violations = validate_outputs(&passport, &resp.outputs);
                if !violations.is_empty() {
                    Outcome::Schema(violations)
                } else {
                    let baseline = default_baseline(&passport, &inputs);
                    match attribute_outputs(
                        &limited,
                        &passport,
                        &inputs,
                        &baseline,
                        &resp,
                        &self.config.explain,
                    ) {
                        Ok(a) => Outcome::Done(resp, a),
                        Err(e) => Outcome::Attribution(e.to_string()),
                    }
                }
            }
        };

        let mut guard = self.lock();
        let inner = &mut *guard;
        inner
            .state
            .jobs
            .get_mut(job_id)
            .expect("jobs are never removed")
            .executing = false;
        let failed = |inner: &mut Inner, detail: Json| {
            inner.record(
                AuditEvent::new(&actor.user_id, AuditAction::JobExecutionFailed)
                    .service(&job.service_id)
                    .version(job.passport_version)
                    .input_hash(&job.case_hash)
                    .detail(detail),
            )
        };
        match outcome {
            Outcome::Adapter(msg) => {
                failed(
                    inner,
                    json!({ "job_id": job.job_id, "reason": "adapter", "error": msg }),
                )?;
                inner
                    .state
                    .jobs
                    .get_mut(job_id)
                    .expect("present")
                    .failed_attempts += 1;
                self.persist(inner)?;
                Err(PlatformError::new(ErrorKind::Upstream, msg))
            }
            Outcome::Schema(violations) => {
                failed(
                    inner,
                    json!({ "job_id": job.job_id, "reason": "output_schema", "violations": violations }),
                )?;
                let stored = inner.state.jobs.get_mut(job_id).expect("present");
                stored.failed_attempts += 1;
                stored.flagged_for_auditor = true;
                self.persist(inner)?;
                Err(PlatformError::new(
                    ErrorKind::Upstream,
                    "model output violates the output schema",
                )
                .with_detail(violations))
            }
            Outcome::Attribution(msg) => {
                failed(
                    inner,
                    json!({ "job_id": job.job_id, "reason": "attribution", "error": msg }),
                )?;
                inner
                    .state
                    .jobs
                    .get_mut(job_id)
                    .expect("present")
                    .failed_attempts += 1;
                self.persist(inner)?;
                Err(PlatformError::new(ErrorKind::Upstream, msg))
            }
            Outcome::Done(resp, mut attributions) => {
                for a in &mut attributions {
                    a.job_id = Some(job.job_id.clone());
                }
                let payload_ref = inner.vault.store(&json!({
                    "job_id": job.job_id,
                    "inputs": inputs,
                    "outputs": resp.outputs,
                    "model_build_id": resp.model_build_id,
                    "attributions": attributions,
                }))?;
                let now = self.now();
                let execution = Execution {
                    at: now,
                    model_build_id: resp.model_build_id.clone(),
                    input_hash: digest_json(&job.case),
                    output_hash: digest_json(&resp.outputs),
                    payload_ref,
                };
                inner.record(
                    AuditEvent::new(&actor.user_id, AuditAction::JobExecuted)
                        .service(&job.service_id)
                        .version(job.passport_version)
                        .hashes(&execution.input_hash, &execution.output_hash)
                        .detail(json!({
                            "job_id": job.job_id,
                            "model_build_id": execution.model_build_id,
                            "payload_ref": execution.payload_ref,
                            "attribution_methods": attributions.iter().map(|a| a.method).collect::<Vec<_>>(),
                        })),
                )?;
                let stored = inner.state.jobs.get_mut(job_id).expect("present");
                stored.advance(JobState::Executed, now)?;
                stored.outputs = resp.outputs;
                stored.execution = Some(execution);
                stored.attributions = attributions;
                let out = stored.clone();
                self.persist(inner)?;
                Ok(out)
            }
        }
    }

    fn may_view(actor: &Actor, job: &PredictionJob) -> bool {
        actor.is_system() || actor.role == Some(Role::Auditor) || job.user_id == actor.user_id
    }

    pub fn get_job(&self, caller: Caller<'_>, job_id: &str) -> Result<PredictionJob> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ViewJobs)?;
        let job = inner
            .state
            .jobs
            .get(job_id)
            .cloned()
            .ok_or_else(|| PlatformError::not_found(format!("job `{job_id}`")))?;
        if !Self::may_view(&actor, &job) {
            return Err(self.deny(
                inner,
                &actor,
                Action::ViewJobs,
                "job belongs to another user",
            ));
        }
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::JobViewed)
                .service(&job.service_id)
                .detail(json!({ "job_id": job.job_id })),
        )?;
        Ok(job)
    }

    pub fn attribution(
        &self,
        caller: Caller<'_>,
        job_id: &str,
    ) -> Result<Vec<crate::xai::Attribution>> {
        let job = self.get_job(caller, job_id)?;
        if job.state < JobState::Executed {
            return Err(PlatformError::new(
                ErrorKind::State,
                format!("job is {}; no attribution yet", job.state),
            ));
        }
        Ok(job.attributions)
    }

    /// Jobs visible to the caller. Clinicians and researchers see their own.
    pub fn list_jobs(
        &self,
        caller: Caller<'_>,
        user: Option<&str>,
        service: Option<&str>,
    ) -> Result<Vec<PredictionJob>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ViewJobs)?;
        let sees_all = actor.is_system() || actor.role == Some(Role::Auditor);
        if !sees_all && user.is_some_and(|u| u != actor.user_id) {
            return Err(self.deny(inner, &actor, Action::ViewJobs, "may only list own jobs"));
        }
        let user = if sees_all {
            user.map(str::to_string)
        } else {
            Some(actor.user_id.clone())
        };
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::JobViewed).detail(json!({
                "list": true,
                "user": user,
                "service": service,
            })),
        )?;
        Ok(inner
            .state
            .jobs
            .values()
            .filter(|j| user.as_ref().is_none_or(|u| &j.user_id == u))
            .filter(|j| service.is_none_or(|s| j.service_id == s))
            .cloned()
            .collect())
    }

    /// Record the observed outcome and close the job.
    pub fn submit_ground_truth(
        &self,
        caller: Caller<'_>,
        job_id: &str,
        outcome: OutcomeInput,
    ) -> Result<GroundTruthRecord> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::SubmitGroundTruth)?;
        let job = inner
            .state
            .jobs
            .get(job_id)
            .cloned()
            .ok_or_else(|| PlatformError::not_found(format!("job `{job_id}`")))?;
        if self.config.ground_truth_same_organisation
            && !actor.is_system()
            && actor.organisation != job.organisation
        {
            return Err(self.deny(
                inner,
                &actor,
                Action::SubmitGroundTruth,
                "job belongs to another organisation",
            ));
        }
        if inner.state.monitor.has_ground_truth(job_id) {
            return Err(PlatformError::new(
                ErrorKind::Conflict,
                format!("ground truth already recorded for job `{job_id}`"),
            ));
        }
        if job.state != JobState::Executed {
            return Err(PlatformError::new(
                ErrorKind::State,
                format!("job is {}; ground truth needs an executed job", job.state),
            ));
        }
        let passport = inner
            .state
            .registry
            .get(&job.service_id, Some(job.passport_version))?;
        let outcomes = outcome.resolve(&passport.clinical_endpoints)?;
        let now = self.now();
        let record = GroundTruthRecord {
            job_id: job_id.to_string(),
            service_id: job.service_id.clone(),
            outcomes,
            submitted_by: actor.user_id.clone(),
            submitted_at: now,
        };
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::GroundTruthSubmitted)
                .service(&job.service_id)
                .version(job.passport_version)
                .input_hash(digest_json(&record.outcomes))
                .detail(json!({ "job_id": job_id, "endpoints": record.outcomes.keys().collect::<Vec<_>>() })),
        )?;
        inner.state.monitor.record_ground_truth(record.clone())?;
        let stored = inner.state.jobs.get_mut(job_id).expect("present");
        stored.ground_truth_ref = Some(job_id.to_string());
        stored.advance(JobState::Closed, now)?;
        self.persist(inner)?;
        Ok(record)
    }

    /// Case bodies of jobs, for review pools.
    pub(super) fn closed_cases<'a>(
        inner: &'a Inner,
        service_id: &'a str,
    ) -> impl Iterator<Item = (&'a PredictionJob, &'a ClinicalCase)> + 'a {
        inner
            .state
            .jobs
            .values()
            .filter(move |j| j.service_id == service_id && j.state == JobState::Closed)
            .map(|j| (j, &j.case))
    }
}

//! The eight risk scenarios, end to end against the stub model. Each returns
//! `Err` with a description of the first expectation that did not hold.

use std::collections::BTreeMap;

use aegis_core::audit::{AuditAction, AuditRecord};
use aegis_core::bias::missing_attribute_note;
use aegis_core::compliance::Mode;
use aegis_core::digest::digest_json;
use aegis_core::gateway::{JobState, LogisticModel};
use aegis_core::interop::Value;
use aegis_core::monitor::{MetricSet, OutcomeInput, Window};
use aegis_core::platform::{
    AckRequest, BiasCase, BiasTestRequest, ConfirmRequest, ErrorKind, NewJob,
};
use aegis_core::quality::{Check, Verdict};
use aegis_core::registry::IntendedContext;
use aegis_core::Caller;
use chrono::TimeDelta;
use serde_json::json;

use super::*;

pub type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Debug>(what: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{what}: {e:?}")
}

fn actions(records: &[AuditRecord], action: AuditAction) -> Vec<&AuditRecord> {
    records.iter().filter(|r| r.action == action).collect()
}

fn for_job<'a>(
    records: &'a [AuditRecord],
    action: AuditAction,
    job_id: &str,
) -> Vec<&'a AuditRecord> {
    records
        .iter()
        .filter(|r| r.action == action && r.detail["job_id"] == json!(job_id))
        .collect()
}

pub const ROWS: [(&str, fn() -> Outcome); 8] = [
    ("1 unit mismatch on creatinine", row1),
    ("2 use outside the intended context", row2),
    ("3 attribute absent from training data", row3),
    ("4 opaque output and silent degradation", row4),
    ("5 unauthorised access", row5),
    ("6 uncertified service", row6),
    ("7 missing input variable", row7),
    ("8 accountability of a decision", row8),
];

/// Creatinine sent in µmol/L is converted; the same number labelled mg/dL is
/// out of range and blocks the job.
pub fn row1() -> Outcome {
    let w = World::new();
    let doc = with_variable(
        case_doc("p-1"),
        "creatinine",
        json!({ "value": 97.0, "unit": "µmol/L" }),
    );
    let job = w
        .draft("clin", Mode::Clinical, doc)
        .map_err(err("draft with µmol/L"))?;
    let got = job
        .case
        .value("creatinine")
        .and_then(Value::as_f64)
        .ok_or("creatinine missing after conversion")?;
    let oracle = 97.0 / 88.4;
    ensure!(
        (got - oracle).abs() < 1e-3,
        "converted creatinine {got} differs from {oracle}"
    );
    ensure!(
        job.case.variables["creatinine"].unit.as_deref() == Some("mg/dL"),
        "unit not normalised"
    );
    ensure!(
        !job.case.provenance.is_empty(),
        "conversion not recorded in provenance"
    );
    ensure!(!job.blocked(), "a converted case should not be blocked");

    let doc = with_variable(
        case_doc("p-2"),
        "creatinine",
        json!({ "value": 88.4, "unit": "mg/dL" }),
    );
    let job = w
        .draft("clin", Mode::Clinical, doc)
        .map_err(err("draft with mislabelled unit"))?;
    ensure!(
        job.quality.verdict == Verdict::Block,
        "mislabelled creatinine passed the quality gate"
    );
    ensure!(
        job.quality
            .hard_failures
            .iter()
            .any(|f| f.variable == "creatinine" && f.check == Check::OutOfRange),
        "no out-of-range failure on creatinine: {:?}",
        job.quality.hard_failures
    );
    let ingested = actions(&w.platform.audit_records(), AuditAction::CaseIngested).len();
    ensure!(
        ingested == 2,
        "expected two CaseIngested records, found {ingested}"
    );
    Ok(())
}

/// A primary-care case against an inpatient model is warned about, the
/// intended context is on the draft, and the user gets a usability prompt.
pub fn row2() -> Outcome {
    let w = World::new();
    let job = w
        .platform
        .create_job(
            w.caller("clin"),
            NewJob {
                service_id: SERVICE.into(),
                mode: Mode::Clinical,
                format: aegis_core::interop::CaseFormat::Flat,
                case: case_doc("p-1"),
                care_context: Some(IntendedContext::PrimaryCare),
            },
        )
        .map_err(err("draft"))?;
    ensure!(
        job.draft.passport.intended_context == IntendedContext::Inpatient,
        "intended context not shown"
    );
    ensure!(
        job.draft
            .warnings
            .iter()
            .any(|m| m.contains("primary_care") && m.contains("inpatient")),
        "no care context warning: {:?}",
        job.draft.warnings
    );
    ensure!(!job.draft.passport.purpose.is_empty(), "purpose not shown");
    let prompt = w
        .platform
        .usability_prompt(w.caller("clin"), SERVICE)
        .map_err(err("prompt"))?;
    let prompt = prompt.ok_or("an active user received no usability prompt")?;
    ensure!(prompt.prompt.open, "prompt not open");
    let again = w
        .platform
        .usability_prompt(w.caller("clin"), SERVICE)
        .map_err(err("prompt"))?;
    ensure!(
        again.map(|p| p.prompt.token) == Some(prompt.prompt.token.clone()),
        "a second prompt was issued within the cadence window"
    );
    let none = w
        .platform
        .usability_prompt(w.caller("researcher"), SERVICE)
        .map_err(err("prompt"))?;
    ensure!(none.is_none(), "a user with no jobs was prompted");
    Ok(())
}

/// Ethnicity is absent from the data: a bias test lists it as missing and the
/// limitation reaches the clinician's double-check.
pub fn row3() -> Outcome {
    let w = World::new();
    let cases: Vec<BiasCase> = (0..24)
        .map(|i| BiasCase {
            attributes: BTreeMap::from([(
                "sex".to_string(),
                if i % 2 == 0 { "female" } else { "male" }.to_string(),
            )]),
            label: i % 3 == 0,
            score: Some((i as f64 * 0.37) % 1.0),
            inputs: None,
        })
        .collect();
    let report = w
        .platform
        .bias_test(
            w.caller("admin"),
            SERVICE,
            BiasTestRequest {
                endpoint: None,
                threshold: None,
                min_group_n: None,
                cases,
            },
        )
        .map_err(err("bias test"))?;
    ensure!(
        report.missing_attributes.contains("ethnicity"),
        "ethnicity not listed as missing"
    );
    let note = missing_attribute_note("ethnicity");
    ensure!(
        report.declared_limitations.contains(&note),
        "missing attribute not echoed as a limitation"
    );
    ensure!(
        report.per_attribute.contains_key("sex"),
        "present attribute not tested"
    );
    let job = w
        .draft("clin", Mode::Clinical, case_doc("p-1"))
        .map_err(err("draft"))?;
    ensure!(
        job.draft.limitations.contains(&note),
        "limitation not shown at the double-check"
    );
    ensure!(
        job.draft
            .passport
            .known_absent_attributes
            .contains("ethnicity"),
        "passport summary lacks the known absent attribute"
    );
    let recorded = actions(&w.platform.audit_records(), AuditAction::BiasTestRun).len();
    ensure!(recorded == 1, "bias test not audited");
    Ok(())
}

/// Every executed prediction is explained, and outcomes feed a performance
/// snapshot that is appended to the passport.
pub fn row4() -> Outcome {
    let w = World::new();
    w.certify().map_err(err("certify"))?;
    let model = LogisticModel::stub();
    let before = w
        .platform
        .passport(w.caller("clin"), SERVICE, None)
        .map_err(err("passport"))?
        .version;
    let mut jobs = Vec::new();
    for i in 0..12 {
        let job = w
            .run_clinical("clin", varied_case(i))
            .map_err(err("run job"))?;
        let expected = model
            .predict(&job.case.inputs())
            .map_err(err("oracle predict"))?;
        ensure!(
            job.attributions.len() == 2,
            "expected one attribution per endpoint"
        );
        for a in &job.attributions {
            let sum: f64 = a.contributions.values().sum();
            let gap = (sum - (a.prediction - a.baseline_prediction)).abs();
            ensure!(
                gap <= 1e-9 * a.prediction.abs().max(1.0),
                "attributions of {} do not sum: gap {gap}",
                a.output
            );
            let out = job.outputs[&a.output]
                .as_f64()
                .ok_or("non-numeric output")?;
            let oracle = expected[&a.output].as_f64().ok_or("non-numeric oracle")?;
            ensure!(
                (out - oracle).abs() < 1e-12,
                "output {} = {out}, oracle {oracle}",
                a.output
            );
            ensure!(
                (a.prediction - out).abs() < 1e-12,
                "attributed prediction differs from the output"
            );
        }
        jobs.push(job);
    }
    for (i, job) in jobs.iter().enumerate() {
        let outcome = OutcomeInput::PerEndpoint(BTreeMap::from([
            ("survival_1y".to_string(), Value::Bool(i % 3 != 0)),
            ("qol_1y".to_string(), Value::Bool(i % 2 == 0)),
        ]));
        w.platform
            .submit_ground_truth(w.caller("clin"), &job.job_id, outcome)
            .map_err(err("ground truth"))?;
    }
    let now = aegis_core::clock::Clock::now(&w.clock);
    let window = Window {
        label: "today".into(),
        start: now - TimeDelta::days(1),
        end: now + TimeDelta::days(1),
    };
    let snaps = w
        .platform
        .compute_performance(w.caller("admin"), SERVICE, window)
        .map_err(err("snapshot"))?;
    ensure!(
        snaps.len() == 2,
        "expected a snapshot per endpoint, got {}",
        snaps.len()
    );
    for s in &snaps {
        ensure!(s.n == 12, "snapshot n = {}", s.n);
        ensure!(
            matches!(s.metrics, MetricSet::Computed(_)),
            "metrics not computed over 12 outcomes"
        );
    }
    let after = w
        .platform
        .passport(w.caller("clin"), SERVICE, None)
        .map_err(err("passport"))?;
    ensure!(
        after.version > before,
        "passport version not bumped by the snapshot"
    );
    ensure!(
        snaps.iter().all(|s| after
            .evaluation_history
            .iter()
            .any(|e| e.id == s.snapshot_id)),
        "snapshots not appended to the evaluation history"
    );
    Ok(())
}

/// Missing or expired tokens and wrong roles are refused and audited.
pub fn row5() -> Outcome {
    let w = World::new();
    let e = w
        .platform
        .create_job(
            Caller::Token("not-a-token"),
            NewJob {
                service_id: SERVICE.into(),
                mode: Mode::Clinical,
                format: aegis_core::interop::CaseFormat::Flat,
                case: case_doc("p-1"),
                care_context: None,
            },
        )
        .err()
        .ok_or("an unknown token was accepted")?;
    ensure!(
        e.kind.http_status() == 401,
        "unknown token gave {}",
        e.kind.http_status()
    );
    let e = w
        .platform
        .register_service(
            w.caller("clin"),
            aegis_core::gateway::stub_passport(),
            ENDPOINT,
        )
        .err()
        .ok_or("a clinician registered a service")?;
    ensure!(
        e.kind.http_status() == 403,
        "wrong role gave {}",
        e.kind.http_status()
    );
    let e = w
        .draft("researcher", Mode::Clinical, case_doc("p-1"))
        .err()
        .ok_or("a researcher submitted a clinical prediction")?;
    ensure!(
        e.kind == ErrorKind::Forbidden,
        "researcher clinical job gave {:?}",
        e.kind
    );
    let e = w
        .platform
        .audit_query(w.caller("clin"), Default::default())
        .err()
        .ok_or("a clinician read the audit trail")?;
    ensure!(
        e.kind == ErrorKind::Forbidden,
        "clinician audit read gave {:?}",
        e.kind
    );
    let job = w
        .draft("clin", Mode::Clinical, case_doc("p-1"))
        .map_err(err("draft"))?;
    let e = w
        .platform
        .get_job(w.caller("clin_b"), &job.job_id)
        .err()
        .ok_or("another clinician read the job")?;
    ensure!(
        e.kind == ErrorKind::Forbidden,
        "cross-user read gave {:?}",
        e.kind
    );
    ensure!(
        w.platform.login("clin", "wrong secret").is_err(),
        "wrong secret logged in"
    );

    let records = w.platform.audit_records();
    let denied = actions(&records, AuditAction::AccessDenied);
    ensure!(
        denied.len() == 5,
        "expected 5 AccessDenied records, found {}",
        denied.len()
    );
    ensure!(
        denied.iter().any(|r| r.user_id == "anonymous"),
        "unknown-token denial not attributed to anonymous"
    );
    ensure!(
        denied.iter().any(|r| r.user_id == "clin_b"),
        "object-level denial not audited"
    );
    ensure!(
        actions(&records, AuditAction::LoginFailed)
            .iter()
            .any(|r| r.user_id == "clin"),
        "failed login not audited"
    );

    let mut w = w;
    w.clock.advance(TimeDelta::hours(13));
    let e = w
        .platform
        .whoami(w.caller("clin"))
        .err()
        .ok_or("an expired session was accepted")?;
    ensure!(
        e.kind.http_status() == 401,
        "expired session gave {}",
        e.kind.http_status()
    );
    w.relogin();
    w.platform
        .whoami(w.caller("clin"))
        .map_err(err("whoami after login"))?;
    Ok(())
}

/// Without a certificate covering the jurisdiction, clinical use is refused
/// and academic use needs the disclaimer acknowledged first.
pub fn row6() -> Outcome {
    let w = World::new();
    let banner = w
        .platform
        .disclaimer(w.caller("clin"), SERVICE)
        .map_err(err("disclaimer"))?;
    ensure!(
        banner.banner_required,
        "uncertified service shows no banner"
    );
    ensure!(
        banner.text == "Only for academic purposes",
        "disclaimer text is {:?}",
        banner.text
    );

    let clinical = w
        .draft("clin", Mode::Clinical, case_doc("p-1"))
        .map_err(err("clinical draft"))?;
    ensure!(
        clinical
            .draft
            .warnings
            .iter()
            .any(|m| m.contains("clinical use not permitted")),
        "draft does not warn about clinical use"
    );
    let e = w
        .platform
        .confirm_job(
            w.caller("clin"),
            &clinical.job_id,
            ConfirmRequest::default(),
        )
        .err()
        .ok_or("an uncertified clinical job was confirmed")?;
    ensure!(
        e.kind == ErrorKind::Refused,
        "clinical confirm gave {:?}",
        e.kind
    );

    let academic = w
        .draft("researcher", Mode::Academic, case_doc("p-2"))
        .map_err(err("academic draft"))?;
    ensure!(
        academic.draft.disclaimer.as_deref() == Some(banner.text.as_str()),
        "academic draft does not carry the disclaimer"
    );
    let e = w
        .platform
        .confirm_job(
            w.caller("researcher"),
            &academic.job_id,
            ConfirmRequest::default(),
        )
        .err()
        .ok_or("academic job confirmed without acknowledgement")?;
    ensure!(
        e.kind == ErrorKind::Refused,
        "academic confirm gave {:?}",
        e.kind
    );
    let e = w
        .platform
        .execute_job(w.caller("researcher"), &academic.job_id)
        .err()
        .ok_or("unconfirmed job executed")?;
    ensure!(
        e.kind == ErrorKind::State,
        "unconfirmed execute gave {:?}",
        e.kind
    );

    w.platform
        .acknowledge_disclaimer(w.caller("researcher"), SERVICE, AckRequest { text: None })
        .map_err(err("acknowledge"))?;
    let confirmed = w
        .platform
        .confirm_job(
            w.caller("researcher"),
            &academic.job_id,
            ConfirmRequest::default(),
        )
        .map_err(err("confirm after ack"))?;
    ensure!(
        confirmed
            .confirmation
            .as_ref()
            .and_then(|c| c.disclaimer_ack.as_ref())
            .is_some(),
        "confirmation does not reference the acknowledgement"
    );
    let done = w
        .platform
        .execute_job(w.caller("researcher"), &academic.job_id)
        .map_err(err("execute"))?;
    ensure!(
        done.state == JobState::Executed,
        "academic job not executed"
    );

    let records = w.platform.audit_records();
    let refused = actions(&records, AuditAction::JobConfirmRefused);
    ensure!(
        refused.len() == 2,
        "expected two refusals on record, found {}",
        refused.len()
    );
    ensure!(
        !actions(&records, AuditAction::DisclaimerAcknowledged).is_empty(),
        "acknowledgement not audited"
    );
    Ok(())
}

/// A missing required input stops the predictive process.
pub fn row7() -> Outcome {
    let w = World::new();
    w.certify().map_err(err("certify"))?;
    let job = w
        .draft(
            "clin",
            Mode::Clinical,
            without_variable(case_doc("p-1"), "albumin"),
        )
        .map_err(err("draft"))?;
    ensure!(job.blocked(), "job without albumin is not blocked");
    ensure!(
        job.draft
            .warnings
            .iter()
            .any(|m| m.contains("the predictive process is stopped")),
        "no stop warning on the draft"
    );
    let e = w
        .platform
        .confirm_job(w.caller("clin"), &job.job_id, ConfirmRequest::default())
        .err()
        .ok_or("a blocked job was confirmed")?;
    ensure!(e.kind == ErrorKind::Refused, "confirm gave {:?}", e.kind);
    ensure!(
        e.message.contains("the predictive process is stopped"),
        "refusal message: {}",
        e.message
    );
    let detail = e.detail.ok_or("refusal carries no quality report")?;
    ensure!(
        detail["hard_failures"].as_array().is_some_and(|fs| fs
            .iter()
            .any(|f| f["variable"] == "albumin" && f["check"] == "missing")),
        "refusal detail lacks the albumin failure: {detail}"
    );
    let e = w
        .platform
        .execute_job(w.caller("clin"), &job.job_id)
        .err()
        .ok_or("a blocked job executed")?;
    ensure!(e.kind == ErrorKind::State, "execute gave {:?}", e.kind);
    let records = w.platform.audit_records();
    ensure!(
        for_job(&records, AuditAction::JobExecuted, &job.job_id).is_empty(),
        "JobExecuted recorded"
    );
    ensure!(
        for_job(&records, AuditAction::JobConfirmRefused, &job.job_id).len() == 1,
        "refusal not audited"
    );
    let stored = w
        .platform
        .get_job(w.caller("clin"), &job.job_id)
        .map_err(err("get"))?;
    ensure!(stored.state == JobState::Draft, "blocked job left draft");
    Ok(())
}

/// The job record shows what the clinician saw and ties it to the audit trail.
pub fn row8() -> Outcome {
    let w = World::new();
    w.certify().map_err(err("certify"))?;
    let draft = w
        .draft("clin", Mode::Clinical, case_doc("p-1"))
        .map_err(err("draft"))?;
    let shown = digest_json(&draft.draft.limitations);
    w.platform
        .confirm_job(
            w.caller("clin"),
            &draft.job_id,
            ConfirmRequest {
                limitations_hash: Some(shown.clone()),
            },
        )
        .map_err(err("confirm"))?;
    w.platform
        .execute_job(w.caller("clin"), &draft.job_id)
        .map_err(err("execute"))?;
    let job = w
        .platform
        .get_job(w.caller("auditor"), &draft.job_id)
        .map_err(err("auditor view"))?;
    ensure!(!job.attributions.is_empty(), "no attribution on the job");
    ensure!(
        job.quality.verdict == Verdict::Pass,
        "quality report missing or failed"
    );
    ensure!(
        job.draft.passport.version == job.passport_version,
        "passport summary version mismatch"
    );
    let conf = job.confirmation.as_ref().ok_or("no confirmation")?;
    ensure!(
        conf.limitations_hash == shown,
        "stored limitations hash differs from the one shown"
    );
    let exec = job.execution.as_ref().ok_or("no execution")?;

    let records = w.platform.audit_records();
    let confirmed = for_job(&records, AuditAction::JobConfirmed, &job.job_id);
    ensure!(confirmed.len() == 1, "expected one JobConfirmed");
    ensure!(
        confirmed[0].detail["confirmation"]["limitations_hash"] == json!(shown),
        "audit limitations hash differs"
    );
    let executed = for_job(&records, AuditAction::JobExecuted, &job.job_id);
    ensure!(executed.len() == 1, "expected one JobExecuted");
    let r = executed[0];
    ensure!(r.user_id == "clin", "executed by {}", r.user_id);
    ensure!(
        r.passport_version == Some(job.passport_version),
        "audit passport version differs"
    );
    ensure!(
        r.input_hash.as_deref() == Some(exec.input_hash.as_str()),
        "input hash differs"
    );
    ensure!(
        r.output_hash.as_deref() == Some(digest_json(&job.outputs).as_str()),
        "output hash differs"
    );
    let payload = w
        .platform
        .load_payload(&exec.payload_ref)
        .map_err(err("payload"))?;
    ensure!(
        payload["job_id"] == json!(job.job_id),
        "payload belongs to another job"
    );
    ensure!(
        digest_json(&payload["outputs"]) == exec.output_hash,
        "vault payload outputs do not match the recorded hash"
    );
    let st = w
        .platform
        .audit_verify(w.caller("auditor"), None)
        .map_err(err("verify"))?;
    ensure!(
        matches!(st, aegis_core::audit::ChainStatus::Ok { .. }),
        "chain does not verify: {st:?}"
    );
    Ok(())
}

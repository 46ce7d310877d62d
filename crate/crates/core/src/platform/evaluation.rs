use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::{Actor, Caller, ErrorKind, Inner, Platform, PlatformError, Result};
use crate::audit::{AuditAction, AuditEvent};
use crate::bias::{run_bias_test, BiasMode, BiasReport, BiasTestInput, LabeledRow};
use crate::gateway::{categorical_attributes, AdapterRequest, Limited, ModelAdapter};
use crate::iam::Action;
use crate::interop::Value;
use crate::monitor::{
    compute_snapshot, detect_drift, DriftAlert, Pair, PerformanceSnapshot, SnapshotInput, Window,
};
use crate::registry::{AiPassport, EvaluationKind, EvaluationRef};
use crate::review::{
    create_session, CaseSource, NewSession, PoolCase, ReviewItemView, ReviewSessionView,
};
use crate::usability::{
    aggregate, shipped_texts, Instrument, NewResponse, Prompt, UsabilityResponse, UsabilityScore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceView {
    pub service_id: String,
    pub snapshots: Vec<PerformanceSnapshot>,
    pub alerts: Vec<DriftAlert>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasCase {
    pub attributes: BTreeMap<String, String>,
    pub label: bool,
    /// Model score; when absent the case `inputs` are scored by the service.
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub inputs: Option<BTreeMap<String, Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasTestRequest {
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub min_group_n: Option<usize>,
    pub cases: Vec<BiasCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasView {
    pub service_id: String,
    pub declared_limitations: Vec<String>,
    pub known_absent_attributes: BTreeSet<String>,
    pub reports: Vec<BiasReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptView {
    pub prompt: Prompt,
    /// Item texts for the prompted instrument.
    pub texts: Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewReview {
    pub service_id: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub source: CaseSource,
    pub n: usize,
}

#[derive(Debug, Clone, Deserialize)]
struct SimulatedCase {
    #[allow(dead_code)]
    case_id: String,
    inputs: BTreeMap<String, Value>,
    outcomes: BTreeMap<String, bool>,
}

fn simulated_cases() -> Vec<SimulatedCase> {
    serde_json::from_str(include_str!("../../fixtures/simulated_cases.json"))
        .expect("simulated case fixture parses")
}

fn pick_endpoint(p: &AiPassport, requested: Option<&str>) -> Result<String> {
    match requested {
        None => p
            .clinical_endpoints
            .first()
            .cloned()
            .ok_or_else(|| PlatformError::invalid("service declares no clinical endpoint")),
        Some(e) if p.clinical_endpoints.iter().any(|c| c == e) => Ok(e.to_string()),
        Some(e) => Err(PlatformError::invalid(format!(
            "`{e}` is not a clinical endpoint of this service"
        ))),
    }
}

fn score(
    adapter: &dyn ModelAdapter,
    passport_version: u64,
    inputs: &BTreeMap<String, Value>,
    endpoint: &str,
) -> Result<f64> {
    let resp = adapter
        .predict(&AdapterRequest {
            inputs: inputs.clone(),
            passport_version,
        })
        .map_err(|e| PlatformError::new(ErrorKind::Upstream, e.to_string()))?;
    resp.outputs
        .get(endpoint)
        .and_then(Value::as_f64)
        .filter(|p| (0.0..=1.0).contains(p))
        .ok_or_else(|| {
            PlatformError::new(
                ErrorKind::Upstream,
                format!("model returned no probability for `{endpoint}`"),
            )
        })
}

impl Platform {
    fn evaluation_update(
        &self,
        inner: &mut Inner,
        actor: &Actor,
        service_id: &str,
        kind: EvaluationKind,
        id: &str,
    ) -> Result<()> {
        let next = inner.state.registry.preview_evaluation(
            service_id,
            EvaluationRef {
                kind,
                id: id.to_string(),
            },
            self.units,
        )?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::PassportUpdated)
                .service(service_id)
                .version(next.version)
                .detail(json!({ "evaluation": { "kind": kind, "id": id } })),
        )?;
        inner.state.registry.commit(next)?;
        Ok(())
    }

    fn pairs(inner: &Inner, passport: &AiPassport, endpoint: &str) -> Vec<Pair> {
        inner
            .state
            .jobs
            .values()
            .filter(|j| j.service_id == passport.service_id)
            .filter_map(|j| {
                let gt = inner.state.monitor.ground_truth(&j.job_id)?;
                Some(Pair {
                    job_id: j.job_id.clone(),
                    score: j.outputs.get(endpoint)?.as_f64()?,
                    outcome: *gt.outcomes.get(endpoint)?,
                    predicted_at: j.executed_at()?,
                    attributes: categorical_attributes(passport, &j.case),
                })
            })
            .collect()
    }

    /// One snapshot per clinical endpoint, each appended to the passport,
    /// followed by drift detection.
    pub fn compute_performance(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        window: Window,
    ) -> Result<Vec<PerformanceSnapshot>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::ComputeSnapshot)?;
        let passport = inner.state.registry.get(service_id, None)?.clone();
        let mut out = Vec::new();
        for endpoint in &passport.clinical_endpoints {
            let pairs = Self::pairs(inner, &passport, endpoint);
            let version = inner.state.registry.get(service_id, None)?.version;
            let snapshot = compute_snapshot(
                SnapshotInput {
                    snapshot_id: crate::ids::new_id("snap"),
                    service_id,
                    endpoint,
                    passport_version: version,
                    window: window.clone(),
                    computed_at: self.now(),
                },
                &pairs,
                &self.config.monitor,
            );
            inner.record(
                AuditEvent::new(&actor.user_id, AuditAction::SnapshotComputed)
                    .service(service_id)
                    .version(version)
                    .detail(json!({
                        "snapshot_id": snapshot.snapshot_id,
                        "endpoint": endpoint,
                        "window": snapshot.window.label,
                        "n": snapshot.n,
                        "metrics": snapshot.metrics,
                    })),
            )?;
            self.evaluation_update(
                inner,
                &actor,
                service_id,
                EvaluationKind::Performance,
                &snapshot.snapshot_id,
            )?;
            inner.state.monitor.push_snapshot(snapshot.clone());
            let history = inner.state.monitor.endpoint_history(service_id, endpoint);
            if let Some(alert) = detect_drift(
                &history,
                passport.declared_performance.get(endpoint),
                self.config.monitor.drift_delta,
            ) {
                inner.record(
                    AuditEvent::new(&actor.user_id, AuditAction::DriftAlert)
                        .service(service_id)
                        .detail(serde_json::to_value(&alert).expect("alert serializes")),
                )?;
                inner.state.monitor.push_alert(alert);
            }
            out.push(snapshot);
        }
        self.persist(inner)?;
        Ok(out)
    }

    pub fn performance(&self, caller: Caller<'_>, service_id: &str) -> Result<PerformanceView> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.authorize(inner, caller, Action::ReadMonitor)?;
        inner.state.registry.entry(service_id)?;
        Ok(PerformanceView {
            service_id: service_id.to_string(),
            snapshots: inner
                .state
                .monitor
                .snapshots(service_id)
                .into_iter()
                .cloned()
                .collect(),
            alerts: inner
                .state
                .monitor
                .alerts(service_id)
                .into_iter()
                .cloned()
                .collect(),
        })
    }

    pub fn bias_test(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        req: BiasTestRequest,
    ) -> Result<BiasReport> {
        let (actor, passport, endpoint, adapter) = {
            let mut guard = self.lock();
            let inner = &mut *guard;
            let actor = self.authorize(inner, caller, Action::RunBiasTest)?;
            let passport = inner.state.registry.get(service_id, None)?.clone();
            let endpoint = pick_endpoint(&passport, req.endpoint.as_deref())?;
            if req.cases.is_empty() {
                return Err(PlatformError::invalid(
                    "bias test needs at least one labeled case",
                ));
            }
            if let Some(i) = req
                .cases
                .iter()
                .position(|c| c.score.is_none() && c.inputs.is_none())
            {
                return Err(PlatformError::invalid(format!(
                    "case {i} has neither a score nor inputs"
                )));
            }
            let url = inner.state.registry.entry(service_id)?.endpoint.clone();
            let adapter = if req.cases.iter().any(|c| c.score.is_none()) {
                Some(self.adapter_for(service_id, &url)?)
            } else {
                None
            };
            (actor, passport, endpoint, adapter)
        };
        let mut rows = Vec::with_capacity(req.cases.len());
        for c in &req.cases {
            let s = match (c.score, &c.inputs, &adapter) {
                (Some(s), _, _) => s,
                (None, Some(inputs), Some(a)) => {
                    let limited = Limited {
                        inner: a.as_ref(),
                        limiter: &self.limiter,
                    };
                    score(&limited, passport.version, inputs, &endpoint)?
                }
                _ => unreachable!("checked above"),
            };
            rows.push(LabeledRow {
                attributes: c.attributes.clone(),
                score: s,
                label: c.label,
            });
        }
        let mut guard = self.lock();
        let inner = &mut *guard;
        let passport = inner.state.registry.get(service_id, None)?.clone();
        let report = run_bias_test(
            BiasTestInput {
                report_id: crate::ids::new_id("bias"),
                service_id,
                endpoint: &endpoint,
                attributes: &passport.training_descriptor.demographic_attributes_present,
                known_absent: &passport.training_descriptor.known_absent_attributes,
                declared_limitations: &passport.declared_limitations,
                threshold: req.threshold.unwrap_or(self.config.monitor.threshold),
                min_group_n: req.min_group_n.unwrap_or(self.config.bias_min_group_n),
                computed_at: self.now(),
            },
            &rows,
        );
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::BiasTestRun)
                .service(service_id)
                .version(passport.version)
                .detail(json!({
                    "report_id": report.report_id,
                    "endpoint": endpoint,
                    "n": report.n,
                    "tested": report.per_attribute.keys().collect::<Vec<_>>(),
                    "missing": report.missing_attributes,
                })),
        )?;
        self.evaluation_update(
            inner,
            &actor,
            service_id,
            EvaluationKind::Bias,
            &report.report_id,
        )?;
        inner.state.bias.push(report.clone());
        self.persist(inner)?;
        Ok(report)
    }

    /// Merge declared bias limitations into the passport.
    pub fn declare_bias(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        limitations: Vec<String>,
    ) -> Result<BiasReport> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::DeclareBias)?;
        let limitations: Vec<String> = limitations
            .into_iter()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if limitations.is_empty() {
            return Err(PlatformError::invalid("no limitations given"));
        }
        let next = inner
            .state
            .registry
            .preview_update(service_id, self.units, |p| {
                for l in &limitations {
                    if !p.declared_limitations.contains(l) {
                        p.declared_limitations.push(l.clone());
                    }
                }
                Ok(())
            })?;
        let report = BiasReport {
            report_id: crate::ids::new_id("bias"),
            service_id: service_id.to_string(),
            endpoint: String::new(),
            mode: BiasMode::Declared,
            declared_limitations: next.declared_limitations.clone(),
            n: 0,
            threshold: self.config.monitor.threshold,
            min_group_n: self.config.bias_min_group_n,
            per_attribute: BTreeMap::new(),
            missing_attributes: next.training_descriptor.known_absent_attributes.clone(),
            computed_at: self.now(),
        };
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::BiasLimitationsDeclared)
                .service(service_id)
                .version(next.version)
                .detail(json!({ "report_id": report.report_id, "limitations": limitations })),
        )?;
        inner.state.registry.commit(next)?;
        inner.state.bias.push(report.clone());
        self.persist(inner)?;
        Ok(report)
    }

    pub fn bias(&self, caller: Caller<'_>, service_id: &str) -> Result<BiasView> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.authorize(inner, caller, Action::ReadBias)?;
        let p = inner.state.registry.get(service_id, None)?;
        Ok(BiasView {
            service_id: service_id.to_string(),
            declared_limitations: p.declared_limitations.clone(),
            known_absent_attributes: p.training_descriptor.known_absent_attributes.clone(),
            reports: inner
                .state
                .bias
                .reports(service_id)
                .into_iter()
                .cloned()
                .collect(),
        })
    }

    /// The open questionnaire prompt for the caller, issuing one when due.
    /// Only users who have used the service are prompted.
    pub fn usability_prompt(
        &self,
        caller: Caller<'_>,
        service_id: &str,
    ) -> Result<Option<PromptView>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::AnswerUsability)?;
        inner.state.registry.entry(service_id)?;
        let active = inner
            .state
            .jobs
            .values()
            .any(|j| j.service_id == service_id && j.user_id == actor.user_id);
        if !active {
            return Ok(None);
        }
        let now = self.now();
        let mut usability = inner.state.usability.clone();
        let prompt = match usability.schedule_prompt(
            crate::ids::new_token(),
            &actor.user_id,
            service_id,
            now,
        ) {
            Some(p) => {
                inner.record(
                    AuditEvent::new(&actor.user_id, AuditAction::UsabilityPromptIssued)
                        .service(service_id)
                        .detail(json!({ "instrument": p.instrument })),
                )?;
                inner.state.usability = usability;
                self.persist(inner)?;
                Some(p)
            }
            None => inner
                .state
                .usability
                .open_prompts(&actor.user_id, service_id)
                .last()
                .cloned(),
        };
        let texts = shipped_texts();
        Ok(prompt.map(|p| PromptView {
            texts: match p.instrument {
                Instrument::Sus => serde_json::to_value(&texts.sus),
                Instrument::UeqS => serde_json::to_value(&texts.ueqs),
            }
            .expect("texts serialize"),
            prompt: p,
        }))
    }

    pub fn submit_usability(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        new: NewResponse,
    ) -> Result<UsabilityResponse> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::AnswerUsability)?;
        inner.state.registry.entry(service_id)?;
        let mut usability = inner.state.usability.clone();
        let r = usability.submit(
            crate::ids::new_id("resp"),
            &actor.user_id,
            service_id,
            new,
            self.now(),
        )?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::UsabilityResponseSubmitted)
                .service(service_id)
                .detail(json!({ "response_id": r.response_id, "instrument": r.instrument, "complete": r.is_complete() })),
        )?;
        inner.state.usability = usability;
        self.persist(inner)?;
        Ok(r)
    }

    /// Score every instrument with complete responses in the window.
    pub fn aggregate_usability(
        &self,
        caller: Caller<'_>,
        service_id: &str,
        window: Window,
    ) -> Result<Vec<UsabilityScore>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::AggregateUsability)?;
        inner.state.registry.entry(service_id)?;
        let mut out = Vec::new();
        for instrument in [Instrument::Sus, Instrument::UeqS] {
            let responses = inner.state.usability.responses(service_id);
            let Some(score) = aggregate(
                crate::ids::new_id("usab"),
                service_id,
                instrument,
                &window,
                &responses,
                self.now(),
            ) else {
                continue;
            };
            inner.record(
                AuditEvent::new(&actor.user_id, AuditAction::UsabilityAggregated)
                    .service(service_id)
                    .detail(json!({
                        "score_id": score.score_id,
                        "instrument": instrument,
                        "n": score.n,
                        "excluded_partial": score.excluded_partial,
                        "window": window.label,
                        "value": score.value,
                    })),
            )?;
            self.evaluation_update(
                inner,
                &actor,
                service_id,
                EvaluationKind::Usability,
                &score.score_id,
            )?;
            inner.state.usability.push_score(score.clone());
            out.push(score);
        }
        self.persist(inner)?;
        Ok(out)
    }

    pub fn usability_scores(
        &self,
        caller: Caller<'_>,
        service_id: &str,
    ) -> Result<Vec<UsabilityScore>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.authorize(inner, caller, Action::ReadPassport)?;
        inner.state.registry.entry(service_id)?;
        Ok(inner
            .state
            .usability
            .scores(service_id)
            .into_iter()
            .cloned()
            .collect())
    }

    pub fn create_review(&self, caller: Caller<'_>, req: NewReview) -> Result<ReviewSessionView> {
        let (actor, passport, endpoint, pool) = {
            let mut guard = self.lock();
            let inner = &mut *guard;
            let actor = self.authorize(inner, caller, Action::RunReview)?;
            let passport = inner.state.registry.get(&req.service_id, None)?.clone();
            let endpoint = pick_endpoint(&passport, req.endpoint.as_deref())?;
            let pool: Option<Vec<PoolCase>> = match req.source {
                CaseSource::Retrospective => Some(
                    Self::closed_cases(inner, &req.service_id)
                        .filter_map(|(job, case)| {
                            let gt = inner.state.monitor.ground_truth(&job.job_id)?;
                            Some(PoolCase {
                                inputs: case.inputs(),
                                recorded_at: Some(case.timestamp()),
                                outcome: *gt.outcomes.get(&endpoint)?,
                                model_prediction: job.outputs.get(&endpoint)?.as_f64()?,
                            })
                        })
                        .collect(),
                ),
                CaseSource::Simulated => None,
            };
            (actor, passport, endpoint, pool)
        };
        let pool = match pool {
            Some(p) => p,
            None => {
                let url = self
                    .lock()
                    .state
                    .registry
                    .entry(&req.service_id)?
                    .endpoint
                    .clone();
                let adapter = self.adapter_for(&req.service_id, &url)?;
                let limited = Limited {
                    inner: adapter.as_ref(),
                    limiter: &self.limiter,
                };
                let mut pool = Vec::new();
                for c in simulated_cases() {
                    let Some(&outcome) = c.outcomes.get(&endpoint) else {
                        continue;
                    };
                    pool.push(PoolCase {
                        model_prediction: score(&limited, passport.version, &c.inputs, &endpoint)?,
                        inputs: c.inputs,
                        recorded_at: None,
                        outcome,
                    });
                }
                pool
            }
        };
        let mut guard = self.lock();
        let inner = &mut *guard;
        let session = create_session(
            NewSession {
                session_id: crate::ids::new_id("review"),
                user_id: &actor.user_id,
                service_id: &req.service_id,
                endpoint: &endpoint,
                source: req.source,
                n: req.n,
                threshold: self.config.monitor.threshold,
                now: self.now(),
            },
            &pool,
            &mut rand::rng(),
        )?;
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::ReviewSessionCreated)
                .service(&req.service_id)
                .detail(json!({
                    "session_id": session.session_id,
                    "source": session.source,
                    "endpoint": endpoint,
                    "n": session.items.len(),
                })),
        )?;
        let view = session.view();
        inner.state.reviews.insert(session);
        self.persist(inner)?;
        Ok(view)
    }

    pub fn review(&self, caller: Caller<'_>, session_id: &str) -> Result<ReviewSessionView> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::RunReview)?;
        let s =
            inner.state.reviews.get(session_id).ok_or_else(|| {
                PlatformError::not_found(format!("review session `{session_id}`"))
            })?;
        if s.user_id != actor.user_id {
            return Err(self.deny(
                inner,
                &actor,
                Action::RunReview,
                "session belongs to another user",
            ));
        }
        Ok(s.view())
    }

    pub fn review_estimate(
        &self,
        caller: Caller<'_>,
        session_id: &str,
        index: usize,
        estimate: bool,
    ) -> Result<ReviewItemView> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::RunReview)?;
        inner
            .state
            .reviews
            .check_estimate(session_id, &actor.user_id, index)?;
        let service = inner
            .state
            .reviews
            .get(session_id)
            .map(|s| s.service_id.clone())
            .unwrap_or_default();
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::ReviewEstimateRecorded)
                .service(service)
                .detail(json!({ "session_id": session_id, "index": index })),
        )?;
        let item =
            inner
                .state
                .reviews
                .record_estimate(session_id, &actor.user_id, index, estimate)?;
        self.persist(inner)?;
        Ok(item)
    }

    pub fn review_complete(
        &self,
        caller: Caller<'_>,
        session_id: &str,
    ) -> Result<ReviewSessionView> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let actor = self.authorize(inner, caller, Action::RunReview)?;
        let report = inner
            .state
            .reviews
            .check_complete(session_id, &actor.user_id)?;
        let service = inner
            .state
            .reviews
            .get(session_id)
            .map(|s| s.service_id.clone())
            .unwrap_or_default();
        inner.record(
            AuditEvent::new(&actor.user_id, AuditAction::ReviewSessionCompleted)
                .service(service)
                .detail(json!({ "session_id": session_id, "n": report.n })),
        )?;
        let view = inner.state.reviews.complete(session_id, &actor.user_id)?;
        self.persist(inner)?;
        Ok(view)
    }
}

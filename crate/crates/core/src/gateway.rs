//! Prediction jobs, the model adapter protocol and the bundled stub model.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{Mode, RegulationDecision};
use crate::digest::canonical_json;
use crate::interop::{ClinicalCase, Value};
use crate::num::Scalar;
use crate::quality::{check_value, QualityReport, Verdict};
use crate::registry::{AiPassport, IntendedContext, PassportSummary, ValueType};
use crate::xai::{explain, Attribution, ExplainConfig, Method};

pub const DEFAULT_ADAPTER_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_CONCURRENT_CALLS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Draft,
    Confirmed,
    Executed,
    Closed,
}

impl JobState {
    /// The only legal successor.
    pub fn next(self) -> Option<JobState> {
        match self {
            JobState::Draft => Some(JobState::Confirmed),
            JobState::Confirmed => Some(JobState::Executed),
            JobState::Executed => Some(JobState::Closed),
            JobState::Closed => None,
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobState::Draft => "draft",
            JobState::Confirmed => "confirmed",
            JobState::Executed => "executed",
            JobState::Closed => "closed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: JobState,
    #[serde(with = "crate::timefmt::millis")]
    pub at: DateTime<Utc>,
}

/// What the user is shown before confirming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftInfo {
    pub passport: PassportSummary,
    pub limitations: Vec<String>,
    pub warnings: Vec<String>,
    /// Academic mode: the disclaimer that must be acknowledged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disclaimer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regulation: Option<RegulationDecision>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unrecognized_variables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confirmation {
    #[serde(with = "crate::timefmt::millis")]
    pub at: DateTime<Utc>,
    pub passport_version: u64,
    pub limitations_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certification_record: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disclaimer_ack: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    #[serde(with = "crate::timefmt::millis")]
    pub at: DateTime<Utc>,
    pub model_build_id: String,
    pub input_hash: String,
    pub output_hash: String,
    pub payload_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionJob {
    pub job_id: String,
    pub user_id: String,
    pub organisation: String,
    pub service_id: String,
    /// Frozen at draft time.
    pub passport_version: u64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub care_context: Option<IntendedContext>,
    pub case: ClinicalCase,
    pub case_hash: String,
    pub quality: QualityReport,
    pub draft: DraftInfo,
    pub state: JobState,
    pub transitions: Vec<Transition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmation: Option<Confirmation>,
    #[serde(default)]
    pub outputs: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<Execution>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributions: Vec<Attribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_ref: Option<String>,
    #[serde(default)]
    pub failed_attempts: u32,
    /// Set when the adapter broke the output contract.
    #[serde(default)]
    pub flagged_for_auditor: bool,
    /// An adapter call is in flight. Not persisted.
    #[serde(skip)]
    pub executing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("job is {from}; cannot move to {to}")]
pub struct StateError {
    pub from: JobState,
    pub to: JobState,
}

impl PredictionJob {
    pub fn blocked(&self) -> bool {
        self.quality.verdict == Verdict::Block
    }

    pub fn advance(&mut self, to: JobState, at: DateTime<Utc>) -> Result<(), StateError> {
        if self.state.next() != Some(to) {
            return Err(StateError {
                from: self.state,
                to,
            });
        }
        self.state = to;
        self.transitions.push(Transition { state: to, at });
        Ok(())
    }

    pub fn executed_at(&self) -> Option<DateTime<Utc>> {
        self.execution.as_ref().map(|e| e.at)
    }
}

/// Body of `POST {endpoint}/predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRequest {
    pub inputs: BTreeMap<String, Value>,
    pub passport_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterResponse {
    pub outputs: BTreeMap<String, Value>,
    pub model_build_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native_attributions: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("model service timed out")]
    Timeout,
    #[error("model service unreachable: {0}")]
    Unreachable(String),
    #[error("model service protocol error: {0}")]
    Protocol(String),
}

impl AdapterError {
    pub fn retryable(&self) -> bool {
        matches!(self, AdapterError::Timeout | AdapterError::Unreachable(_))
    }
}

pub trait ModelAdapter: Send + Sync {
    fn predict(&self, request: &AdapterRequest) -> Result<AdapterResponse, AdapterError>;
}

/// Retries allowed after the first attempt. Clinical calls are never retried.
pub fn retries_for(mode: Mode) -> u32 {
    match mode {
        Mode::Clinical => 0,
        Mode::Academic => 1,
    }
}

pub fn call_with_retry(
    adapter: &dyn ModelAdapter,
    request: &AdapterRequest,
    retries: u32,
) -> Result<AdapterResponse, AdapterError> {
    let mut attempt = 0;
    loop {
        match adapter.predict(request) {
            Err(e) if e.retryable() && attempt < retries => attempt += 1,
            other => return other,
        }
    }
}

/// Counting semaphore bounding concurrent outbound model calls.
pub struct CallLimiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct CallPermit<'a>(&'a CallLimiter);

impl Drop for CallPermit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock() -= 1;
        self.0.freed.notify_one();
    }
}

impl CallLimiter {
    pub fn new(max: usize) -> Self {
        assert!(max > 0, "limiter needs at least one slot");
        Self {
            max,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> CallPermit<'_> {
        let mut n = self.in_flight.lock();
        while *n >= self.max {
            self.freed.wait(&mut n);
        }
        *n += 1;
        CallPermit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock()
    }
}

/// Adapter wrapper that takes a limiter slot per call.
pub struct Limited<'a> {
    pub inner: &'a dyn ModelAdapter,
    pub limiter: &'a CallLimiter,
}

impl ModelAdapter for Limited<'_> {
    fn predict(&self, request: &AdapterRequest) -> Result<AdapterResponse, AdapterError> {
        let _permit = self.limiter.acquire();
        self.inner.predict(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputViolation {
    pub variable: String,
    pub detail: String,
}

/// Check an adapter response against the passport's output schema.
pub fn validate_outputs(
    passport: &AiPassport,
    outputs: &BTreeMap<String, Value>,
) -> Vec<OutputViolation> {
    let mut v = Vec::new();
    for spec in &passport.output_schema {
        match outputs.get(&spec.name) {
            None if spec.required => v.push(OutputViolation {
                variable: spec.name.clone(),
                detail: "missing".into(),
            }),
            None => {}
            Some(value) => {
                if let Some((_, detail)) = check_value(spec, value) {
                    v.push(OutputViolation {
                        variable: spec.name.clone(),
                        detail,
                    });
                }
            }
        }
    }
    for name in outputs.keys().filter(|k| passport.output(k).is_none()) {
        v.push(OutputViolation {
            variable: name.clone(),
            detail: "not declared in output schema".into(),
        });
    }
    v
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("attribution failed for `{output}`: {detail}")]
    Failed { output: String, detail: String },
}

/// Attributions for every clinical endpoint, or the adapter's native ones
/// verbatim. Mixture evaluations are shared across endpoints.
pub fn attribute_outputs(
    adapter: &dyn ModelAdapter,
    passport: &AiPassport,
    inputs: &BTreeMap<String, Value>,
    baseline: &BTreeMap<String, Value>,
    response: &AdapterResponse,
    config: &ExplainConfig,
) -> Result<Vec<Attribution>, AttributionError> {
    if let Some(native) = &response.native_attributions {
        let output = passport
            .clinical_endpoints
            .first()
            .cloned()
            .unwrap_or_default();
        let prediction = response
            .outputs
            .get(&output)
            .and_then(Value::as_f64)
            .unwrap_or(f64::NAN);
        return Ok(vec![Attribution {
            job_id: None,
            output,
            baseline: baseline.clone(),
            prediction,
            baseline_prediction: prediction - native.values().sum::<f64>(),
            contributions: native.clone(),
            method: Method::Native,
            n_samples: None,
            seed: None,
            std_error: None,
        }]);
    }
    let cache: Mutex<HashMap<String, BTreeMap<String, Value>>> = Mutex::new(HashMap::new());
    cache
        .lock()
        .insert(canonical_json(inputs), response.outputs.clone());
    let eval = |x: &BTreeMap<String, Value>| -> Result<BTreeMap<String, Value>, AdapterError> {
        let key = canonical_json(x);
        if let Some(hit) = cache.lock().get(&key) {
            return Ok(hit.clone());
        }
        let r = adapter.predict(&AdapterRequest {
            inputs: x.clone(),
            passport_version: passport.version,
        })?;
        cache.lock().insert(key, r.outputs.clone());
        Ok(r.outputs)
    };
    let mut out = Vec::new();
    for endpoint in &passport.clinical_endpoints {
        let model = |x: &BTreeMap<String, Value>| -> Result<f64, AttributionError> {
            let outputs = eval(x)?;
            outputs
                .get(endpoint)
                .and_then(Value::as_f64)
                .filter(|p| p.is_finite())
                .ok_or_else(|| AttributionError::Failed {
                    output: endpoint.clone(),
                    detail: "model returned no numeric value for a mixture input".into(),
                })
        };
        let a = explain(endpoint, inputs, baseline, config, model).map_err(|e| match e {
            crate::xai::XaiError::Model(inner) => inner,
            other => AttributionError::Failed {
                output: endpoint.clone(),
                detail: other.to_string(),
            },
        })?;
        out.push(a);
    }
    Ok(out)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// `sigmoid(intercept + w . x)`
pub fn logistic<T: Scalar>(intercept: T, weights: &[T], x: &[T]) -> T {
    assert_eq!(
        weights.len(),
        x.len(),
        "weights and inputs differ in length"
    );
    sigmoid(intercept + weights.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub intercept: f64,
    pub weights: Vec<f64>,
}

/// Logistic regression over standardized features, one head per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticModel {
    pub build_id: String,
    pub features: Vec<Standardizer>,
    pub outputs: BTreeMap<String, LogisticHead>,
}

impl LogisticModel {
    pub fn stub() -> Self {
        serde_json::from_str(include_str!("../fixtures/stub_model.json"))
            .expect("stub model fixture parses")
    }

    pub fn predict(
        &self,
        inputs: &BTreeMap<String, Value>,
    ) -> Result<BTreeMap<String, Value>, String> {
        let x: Vec<f64> = self
            .features
            .iter()
            .map(|f| {
                inputs
                    .get(&f.name)
                    .and_then(Value::as_f64)
                    .map(|v| (v - f.mean) / f.sd)
                    .ok_or_else(|| format!("missing numeric input `{}`", f.name))
            })
            .collect::<Result<_, _>>()?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, h)| {
                (
                    name.clone(),
                    Value::Number(logistic(h.intercept, &h.weights, &x)),
                )
            })
            .collect())
    }
}

/// Passport describing the bundled stub model.
pub fn stub_passport() -> AiPassport {
    serde_json::from_str(include_str!("../fixtures/stub_passport.json"))
        .expect("stub passport fixture parses")
}

/// In-process adapter serving a [`LogisticModel`].
#[derive(Debug, Clone)]
pub struct StubAdapter {
    pub model: Arc<LogisticModel>,
}

impl Default for StubAdapter {
    fn default() -> Self {
        Self {
            model: Arc::new(LogisticModel::stub()),
        }
    }
}

impl ModelAdapter for StubAdapter {
    fn predict(&self, request: &AdapterRequest) -> Result<AdapterResponse, AdapterError> {
        let outputs = self
            .model
            .predict(&request.inputs)
            .map_err(AdapterError::Protocol)?;
        Ok(AdapterResponse {
            outputs,
            model_build_id: self.model.build_id.clone(),
            native_attributions: None,
        })
    }
}

/// Categorical inputs, used to break metrics down by subgroup.
pub fn categorical_attributes(
    passport: &AiPassport,
    case: &ClinicalCase,
) -> BTreeMap<String, String> {
    passport
        .input_schema
        .iter()
        .filter(|s| s.value_type == ValueType::Categorical)
        .filter_map(|s| {
            case.value(&s.name)
                .and_then(Value::as_str)
                .map(|v| (s.name.clone(), v.to_string()))
        })
        .collect()
}

//! Model-service registrations and their versioned AI passports.
//!
//! A passport is never edited in place: every mutation clones the latest
//! version, applies the change, revalidates and appends it as version `n + 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interop::{UnitTable, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntendedContext {
    Inpatient,
    Outpatient,
    PrimaryCare,
    Academic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Numeric,
    Categorical,
    Boolean,
    Datetime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub value_type: ValueType,
    /// UCUM-style unit, numeric variables only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    /// `[low, high]`, numeric variables only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub required: bool,
}

fn default_true() -> bool {
    true
}

impl VariableSpec {
    pub fn numeric(name: &str, unit: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.to_string(),
            value_type: ValueType::Numeric,
            unit: Some(unit.to_string()),
            valid_range: Some([low, high]),
            categories: None,
            required: true,
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            value_type: ValueType::Categorical,
            unit: None,
            valid_range: None,
            categories: Some(categories.iter().map(|c| c.to_string()).collect()),
            required: true,
        }
    }

    pub fn boolean(name: &str) -> Self {
        Self {
            name: name.to_string(),
            value_type: ValueType::Boolean,
            unit: None,
            valid_range: None,
            categories: None,
            required: true,
        }
    }

    pub fn optional(mut self) -> Self {
        self.required = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateInterval {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingDescriptor {
    pub dataset_name: String,
    pub collection_period: DateInterval,
    pub population: String,
    pub demographic_attributes_present: BTreeSet<String>,
    pub known_absent_attributes: BTreeSet<String>,
    pub case_count: u64,
    /// Per-feature medians of the training data: the default attribution baseline.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub feature_medians: BTreeMap<String, Value>,
}

/// Quality dimensions that cannot be computed from a case and are declared by
/// the manufacturer instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclaredDimension {
    Contextualisation,
    PredictiveValue,
    Reliability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredPerformance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationKind {
    Performance,
    Usability,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRef {
    pub kind: EvaluationKind,
    pub id: String,
}

/// The `passport.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AiPassport {
    pub service_id: String,
    #[serde(default = "first_version")]
    pub version: u64,
    pub purpose: String,
    pub intended_context: IntendedContext,
    #[serde(default)]
    pub ethical_declarations: Vec<String>,
    pub manufacturer: String,
    pub training_descriptor: TrainingDescriptor,
    pub input_schema: Vec<VariableSpec>,
    pub output_schema: Vec<VariableSpec>,
    /// Outputs that are monitored clinical endpoints (probabilities in [0, 1]).
    pub clinical_endpoints: Vec<String>,
    #[serde(default)]
    pub declared_limitations: Vec<String>,
    #[serde(default)]
    pub declared_quality: BTreeMap<DeclaredDimension, String>,
    /// Baseline performance per endpoint, the reference for drift alerts.
    #[serde(default)]
    pub declared_performance: BTreeMap<String, DeclaredPerformance>,
    #[serde(default)]
    pub certification_refs: Vec<String>,
    #[serde(default)]
    pub evaluation_history: Vec<EvaluationRef>,
}

fn first_version() -> u64 {
    1
}

impl AiPassport {
    pub fn input(&self, name: &str) -> Option<&VariableSpec> {
        self.input_schema.iter().find(|v| v.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&VariableSpec> {
        self.output_schema.iter().find(|v| v.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("passport serializes")
    }

    pub fn summary(&self) -> PassportSummary {
        PassportSummary {
            service_id: self.service_id.clone(),
            version: self.version,
            purpose: self.purpose.clone(),
            intended_context: self.intended_context,
            manufacturer: self.manufacturer.clone(),
            training_population: self.training_descriptor.population.clone(),
            declared_limitations: self.declared_limitations.clone(),
            known_absent_attributes: self.training_descriptor.known_absent_attributes.clone(),
            declared_quality: self.declared_quality.clone(),
            certification_refs: self.certification_refs.clone(),
            evaluation_history: self.evaluation_history.clone(),
        }
    }
}

/// What the double-check dialog shows about a passport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassportSummary {
    pub service_id: String,
    pub version: u64,
    pub purpose: String,
    pub intended_context: IntendedContext,
    pub manufacturer: String,
    pub training_population: String,
    pub declared_limitations: Vec<String>,
    pub known_absent_attributes: BTreeSet<String>,
    pub declared_quality: BTreeMap<DeclaredDimension, String>,
    pub certification_refs: Vec<String>,
    pub evaluation_history: Vec<EvaluationRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    pub fn at(&self, path: &str) -> Vec<&Violation> {
        self.violations.iter().filter(|v| v.path == path).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Error)]
#[error("passport is not a parseable passport document: {0}")]
pub struct PassportFormatError(#[from] pub serde_json::Error);

/// Parse and validate a passport file.
pub fn validate_passport(
    document: &str,
    units: &UnitTable,
) -> Result<ValidationReport, PassportFormatError> {
    let passport: AiPassport = serde_json::from_str(document)?;
    Ok(validate(&passport, units))
}

pub fn parse_passport(document: &str) -> Result<AiPassport, PassportFormatError> {
    Ok(serde_json::from_str(document)?)
}

fn check_schema(
    report: &mut ValidationReport,
    field: &str,
    schema: &[VariableSpec],
    units: &UnitTable,
) {
    if schema.is_empty() {
        report.push(field, "schema must declare at least one variable");
    }
    let mut seen = BTreeSet::new();
    for spec in schema {
        let path = format!("{field}[{}]", spec.name);
        if spec.name.trim().is_empty() {
            report.push(format!("{field}[]"), "variable name is empty");
        }
        if !seen.insert(spec.name.as_str()) {
            report.push(&path, "duplicate variable name");
        }
        match spec.value_type {
            ValueType::Numeric => {
                match &spec.unit {
                    None => report.push(
                        format!("{path}.unit"),
                        "numeric variable must declare a unit",
                    ),
                    Some(u) if !units.is_known(u) => {
                        report.push(format!("{path}.unit"), format!("unknown unit `{u}`"))
                    }
                    Some(_) => {}
                }
                match spec.valid_range {
                    None => report.push(
                        format!("{path}.valid_range"),
                        "numeric variable must declare a valid range",
                    ),
                    Some([lo, hi]) if !lo.is_finite() || !hi.is_finite() => {
                        report.push(format!("{path}.valid_range"), "range bounds must be finite")
                    }
                    Some([lo, hi]) if lo > hi => {
                        report.push(format!("{path}.valid_range"), "range low > high")
                    }
                    Some(_) => {}
                }
            }
            other => {
                if spec.unit.is_some() {
                    report.push(
                        format!("{path}.unit"),
                        "unit is only allowed on numeric variables",
                    );
                }
                if spec.valid_range.is_some() {
                    report.push(
                        format!("{path}.valid_range"),
                        "valid_range is only allowed on numeric variables",
                    );
                }
                if other == ValueType::Categorical {
                    if spec.categories.as_ref().is_none_or(|c| c.is_empty()) {
                        report.push(
                            format!("{path}.categories"),
                            "categorical variable must list its categories",
                        );
                    }
                } else if spec.categories.is_some() {
                    report.push(
                        format!("{path}.categories"),
                        "categories are only allowed on categorical variables",
                    );
                }
            }
        }
    }
}

/// Check every passport invariant. Pure: same passport, same report.
pub fn validate(p: &AiPassport, units: &UnitTable) -> ValidationReport {
    let mut r = ValidationReport::default();
    for (path, text) in [
        ("service_id", &p.service_id),
        ("purpose", &p.purpose),
        ("manufacturer", &p.manufacturer),
        (
            "training_descriptor.dataset_name",
            &p.training_descriptor.dataset_name,
        ),
        (
            "training_descriptor.population",
            &p.training_descriptor.population,
        ),
    ] {
        if text.trim().is_empty() {
            r.push(path, "must not be empty");
        }
    }
    if p.version == 0 {
        r.push("version", "versions start at 1");
    }
    check_schema(&mut r, "input_schema", &p.input_schema, units);
    check_schema(&mut r, "output_schema", &p.output_schema, units);

    let td = &p.training_descriptor;
    if td.collection_period.start > td.collection_period.end {
        r.push("training_descriptor.collection_period", "start after end");
    }
    for a in td
        .demographic_attributes_present
        .intersection(&td.known_absent_attributes)
    {
        r.push(
            "training_descriptor.known_absent_attributes",
            format!("`{a}` is also listed as present"),
        );
    }
    for name in td.feature_medians.keys() {
        if p.input(name).is_none() {
            r.push(
                format!("training_descriptor.feature_medians[{name}]"),
                "not an input variable",
            );
        }
    }

    if p.clinical_endpoints.is_empty() {
        r.push(
            "clinical_endpoints",
            "at least one output must be marked as clinical endpoint",
        );
    }
    let mut seen = BTreeSet::new();
    for name in &p.clinical_endpoints {
        let path = format!("clinical_endpoints[{name}]");
        if !seen.insert(name) {
            r.push(&path, "listed twice");
        }
        match p.output(name) {
            None => r.push(&path, "not an output variable"),
            Some(spec) => {
                let prob = spec.value_type == ValueType::Numeric
                    && spec
                        .valid_range
                        .is_some_and(|[lo, hi]| lo >= 0.0 && hi <= 1.0);
                if !prob {
                    r.push(
                        &path,
                        "endpoint must be a numeric probability within [0, 1]",
                    );
                }
            }
        }
    }
    for (name, perf) in &p.declared_performance {
        let path = format!("declared_performance[{name}]");
        if !p.clinical_endpoints.contains(name) {
            r.push(&path, "not a clinical endpoint");
        }
        for m in [perf.auc, perf.accuracy].into_iter().flatten() {
            if !(0.0..=1.0).contains(&m) {
                r.push(&path, "metric outside [0, 1]");
            }
        }
    }
    let mut seen = BTreeSet::new();
    for e in &p.evaluation_history {
        if !seen.insert(e) {
            r.push(
                format!("evaluation_history[{}]", e.id),
                "duplicate evaluation reference",
            );
        }
    }
    r
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("service `{0}` already registered")]
    Conflict(String),
    #[error("passport invalid: {0}")]
    Invalid(ValidationReport),
    #[error("{0} not found")]
    NotFound(String),
    #[error("evaluation `{0}` already in passport history")]
    DuplicateEvaluation(String),
    #[error("{0}")]
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub service_id: String,
    pub endpoint: String,
    #[serde(with = "crate::timefmt::millis")]
    pub registered_at: DateTime<Utc>,
    /// `versions[i].version == i + 1`.
    pub versions: Vec<AiPassport>,
}

impl ServiceEntry {
    pub fn latest(&self) -> &AiPassport {
        self.versions
            .last()
            .expect("entry holds at least version 1")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceListing {
    pub service_id: String,
    pub endpoint: String,
    pub latest_version: u64,
    pub purpose: String,
    pub intended_context: IntendedContext,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    services: BTreeMap<String, ServiceEntry>,
}

impl Registry {
    pub fn register(
        &mut self,
        passport: AiPassport,
        endpoint: &str,
        units: &UnitTable,
        now: DateTime<Utc>,
    ) -> Result<&AiPassport, RegistryError> {
        let entry = self.preview_register(passport, endpoint, units, now)?;
        self.insert_entry(entry)
    }

    /// The entry [`Registry::register`] would create.
    pub fn preview_register(
        &self,
        mut passport: AiPassport,
        endpoint: &str,
        units: &UnitTable,
        now: DateTime<Utc>,
    ) -> Result<ServiceEntry, RegistryError> {
        if self.services.contains_key(&passport.service_id) {
            return Err(RegistryError::Conflict(passport.service_id));
        }
        if !passport.certification_refs.is_empty() || !passport.evaluation_history.is_empty() {
            return Err(RegistryError::Rejected(
                "certification_refs and evaluation_history are maintained by the platform and must be empty at registration"
                    .into(),
            ));
        }
        passport.version = 1;
        let report = validate(&passport, units);
        if !report.is_valid() {
            return Err(RegistryError::Invalid(report));
        }
        Ok(ServiceEntry {
            service_id: passport.service_id.clone(),
            endpoint: endpoint.to_string(),
            registered_at: now,
            versions: vec![passport],
        })
    }

    pub fn insert_entry(&mut self, entry: ServiceEntry) -> Result<&AiPassport, RegistryError> {
        if self.services.contains_key(&entry.service_id) {
            return Err(RegistryError::Conflict(entry.service_id));
        }
        if entry.versions.is_empty() {
            return Err(RegistryError::Rejected("entry holds no passport".into()));
        }
        let id = entry.service_id.clone();
        Ok(self.services.entry(id).or_insert(entry).latest())
    }

    pub fn contains(&self, service_id: &str) -> bool {
        self.services.contains_key(service_id)
    }

    pub fn entry(&self, service_id: &str) -> Result<&ServiceEntry, RegistryError> {
        self.services
            .get(service_id)
            .ok_or_else(|| RegistryError::NotFound(format!("service `{service_id}`")))
    }

    pub fn get(
        &self,
        service_id: &str,
        version: Option<u64>,
    ) -> Result<&AiPassport, RegistryError> {
        let entry = self.entry(service_id)?;
        match version {
            None => Ok(entry.latest()),
            Some(v) => v
                .checked_sub(1)
                .and_then(|i| entry.versions.get(i as usize))
                .ok_or_else(|| {
                    RegistryError::NotFound(format!("passport `{service_id}` version {v}"))
                }),
        }
    }

    pub fn list(&self) -> Vec<ServiceListing> {
        self.services
            .values()
            .map(|e| {
                let p = e.latest();
                ServiceListing {
                    service_id: e.service_id.clone(),
                    endpoint: e.endpoint.clone(),
                    latest_version: p.version,
                    purpose: p.purpose.clone(),
                    intended_context: p.intended_context,
                }
            })
            .collect()
    }

    /// Append a new version produced by `change`. The change may not touch
    /// `service_id` or `version`.
    pub fn update(
        &mut self,
        service_id: &str,
        units: &UnitTable,
        change: impl FnOnce(&mut AiPassport) -> Result<(), RegistryError>,
    ) -> Result<&AiPassport, RegistryError> {
        let next = self.preview_update(service_id, units, change)?;
        self.commit(next)
    }

    /// The version [`Registry::update`] would append, without appending it.
    pub fn preview_update(
        &self,
        service_id: &str,
        units: &UnitTable,
        change: impl FnOnce(&mut AiPassport) -> Result<(), RegistryError>,
    ) -> Result<AiPassport, RegistryError> {
        let latest = self.entry(service_id)?.latest();
        let mut next = latest.clone();
        change(&mut next)?;
        next.service_id = service_id.to_string();
        next.version = latest.version + 1;
        let report = validate(&next, units);
        if !report.is_valid() {
            return Err(RegistryError::Invalid(report));
        }
        Ok(next)
    }

    /// Append a previewed version. Refuses anything that is not exactly the
    /// successor of the current latest version.
    pub fn commit(&mut self, next: AiPassport) -> Result<&AiPassport, RegistryError> {
        let entry = self
            .services
            .get_mut(&next.service_id)
            .ok_or_else(|| RegistryError::NotFound(format!("service `{}`", next.service_id)))?;
        if next.version != entry.latest().version + 1 {
            return Err(RegistryError::Rejected(format!(
                "stale passport version {} (latest is {})",
                next.version,
                entry.latest().version
            )));
        }
        entry.versions.push(next);
        Ok(entry.latest())
    }

    /// Extend the evaluation history. Existence of the referenced snapshot is
    /// checked by the caller, which owns the snapshot stores.
    pub fn append_evaluation(
        &mut self,
        service_id: &str,
        evaluation: EvaluationRef,
        units: &UnitTable,
    ) -> Result<&AiPassport, RegistryError> {
        let next = self.preview_evaluation(service_id, evaluation, units)?;
        self.commit(next)
    }

    pub fn preview_evaluation(
        &self,
        service_id: &str,
        evaluation: EvaluationRef,
        units: &UnitTable,
    ) -> Result<AiPassport, RegistryError> {
        self.preview_update(service_id, units, |p| {
            if p.evaluation_history.contains(&evaluation) {
                return Err(RegistryError::DuplicateEvaluation(evaluation.id.clone()));
            }
            p.evaluation_history.push(evaluation);
            Ok(())
        })
    }
}

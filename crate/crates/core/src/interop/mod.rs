//! Case ingestion from external documents, unit normalization and mapping to
//! model input schemas.
//!
//! Two ingestion formats are supported. Neither is a conformant openEHR or
//! FHIR implementation; external systems are bridged through a
//! [`MappingProfile`] that maps archetype/resource-style dotted paths onto
//! model variable names.
//!
//! `flat`:
//! ```json
//! { "patient_pseudo_id": "p-91", "source_system": "his",
//!   "variables": { "creatinine": { "value": 88.4, "unit": "umol/L" }, "age": 81 } }
//! ```
//!
//! `observation_bundle`:
//! ```json
//! { "patient_pseudo_id": "p-91", "source_system": "lab",
//!   "observations": [ { "code": "lab.creatinine", "value": 88.4, "unit": "umol/L",
//!                       "effective": "2025-06-01T08:00:00Z" } ] }
//! ```

mod units;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::registry::{ValueType, VariableSpec};

pub use units::{Dimension, UnitDef, UnitError, UnitTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InteropError {
    #[error("document is not valid JSON for format {format}: {detail}")]
    Parse { format: CaseFormat, detail: String },
    #[error("unknown case format `{0}`")]
    UnknownFormat(String),
    #[error("document lacks a patient pseudo-id")]
    MissingPseudoId,
    #[error("document contains direct identifier field(s): {0:?}")]
    DirectIdentifier(Vec<String>),
    #[error("variable `{0}` appears more than once")]
    DuplicateVariable(String),
    #[error("bundle ingestion needs a mapping profile")]
    ProfileRequired,
    #[error("required input(s) not mapped: {0:?}")]
    UnmappedRequired(Vec<String>),
    #[error("unit conversion failed: {}", .0.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    Conversion(Vec<ConversionFailure>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionFailure {
    pub variable: String,
    pub detail: String,
}

impl fmt::Display for ConversionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.variable, self.detail)
    }
}

/// A clinical value as exchanged with external systems and model adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Number(x) => write!(f, "{x}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Number(x)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::timefmt::millis_opt"
    )]
    pub observed_at: Option<DateTime<Utc>>,
}

impl Observation {
    pub fn new(value: impl Into<Value>, unit: Option<&str>) -> Self {
        Self {
            value: value.into(),
            unit: unit.map(str::to_string),
            observed_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalCase {
    pub case_id: String,
    /// Opaque pseudonym; never a direct identifier.
    pub patient_pseudo_id: String,
    pub variables: BTreeMap<String, Observation>,
    pub source_system: String,
    #[serde(with = "crate::timefmt::millis")]
    pub ingested_at: DateTime<Utc>,
    /// When the case was recorded at the source, if the document says.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::timefmt::millis_opt"
    )]
    pub recorded_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl ClinicalCase {
    pub fn value(&self, name: &str) -> Option<&Value> {
        self.variables.get(name).map(|o| &o.value)
    }

    /// Time used to order cases in a dataset: the recorded time, else the
    /// latest observation time, else ingestion time.
    pub fn timestamp(&self) -> DateTime<Utc> {
        self.recorded_at
            .or_else(|| self.variables.values().filter_map(|o| o.observed_at).max())
            .unwrap_or(self.ingested_at)
    }

    /// Model inputs: name to value only.
    pub fn inputs(&self) -> BTreeMap<String, Value> {
        self.variables
            .iter()
            .map(|(k, o)| (k.clone(), o.value.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFormat {
    Flat,
    ObservationBundle,
}

impl fmt::Display for CaseFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseFormat::Flat => "flat",
            CaseFormat::ObservationBundle => "observation_bundle",
        })
    }
}

impl std::str::FromStr for CaseFormat {
    type Err = InteropError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(CaseFormat::Flat),
            "observation_bundle" | "bundle" => Ok(CaseFormat::ObservationBundle),
            other => Err(InteropError::UnknownFormat(other.to_string())),
        }
    }
}

/// Field names treated as direct identifiers. Matching is case-insensitive on
/// the last dotted segment of any key or observation code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifierPolicy {
    pub forbidden: BTreeSet<String>,
}

impl Default for IdentifierPolicy {
    fn default() -> Self {
        let forbidden = [
            "name",
            "patient_name",
            "full_name",
            "first_name",
            "last_name",
            "surname",
            "national_id",
            "ssn",
            "nhs_number",
            "dni",
            "passport_number",
            "address",
            "phone",
            "email",
        ];
        Self {
            forbidden: forbidden.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl IdentifierPolicy {
    fn is_forbidden(&self, key: &str) -> bool {
        let last = key.rsplit('.').next().unwrap_or(key).to_ascii_lowercase();
        self.forbidden.contains(&last)
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum FlatEntry {
    Full {
        value: Value,
        #[serde(default)]
        unit: Option<String>,
        #[serde(default)]
        observed_at: Option<String>,
    },
    Bare(Value),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatDocument {
    #[serde(default)]
    case_id: Option<String>,
    #[serde(default)]
    patient_pseudo_id: Option<String>,
    #[serde(default)]
    source_system: Option<String>,
    #[serde(default)]
    recorded_at: Option<String>,
    variables: BTreeMap<String, FlatEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleObservation {
    code: String,
    value: Value,
    #[serde(default)]
    unit: Option<String>,
    #[serde(default)]
    effective: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDocument {
    #[serde(default)]
    case_id: Option<String>,
    #[serde(default)]
    patient_pseudo_id: Option<String>,
    #[serde(default)]
    source_system: Option<String>,
    #[serde(default)]
    recorded_at: Option<String>,
    observations: Vec<BundleObservation>,
}

fn parse_time(
    format: CaseFormat,
    raw: Option<String>,
) -> Result<Option<DateTime<Utc>>, InteropError> {
    raw.map(|s| {
        crate::timefmt::parse_datetime(&s).ok_or_else(|| InteropError::Parse {
            format,
            detail: format!("bad timestamp `{s}`"),
        })
    })
    .transpose()
}

fn pseudo_id(raw: Option<String>) -> Result<String, InteropError> {
    match raw {
        Some(p) if !p.trim().is_empty() => Ok(p),
        _ => Err(InteropError::MissingPseudoId),
    }
}

/// Parse an external case document. Variables keep their external names;
/// [`apply_profile`] renames them to model variables.
pub fn ingest_case(
    document: &str,
    format: CaseFormat,
    policy: &IdentifierPolicy,
    now: DateTime<Utc>,
) -> Result<ClinicalCase, InteropError> {
    let parse_err = |e: serde_json::Error| InteropError::Parse {
        format,
        detail: e.to_string(),
    };
    let raw: Json = serde_json::from_str(document).map_err(parse_err)?;
    let mut flagged = Vec::new();
    if let Json::Object(top) = &raw {
        flagged.extend(top.keys().filter(|k| policy.is_forbidden(k)).cloned());
        if let Some(Json::Object(vars)) = top.get("variables") {
            flagged.extend(vars.keys().filter(|k| policy.is_forbidden(k)).cloned());
        }
        if let Some(Json::Array(obs)) = top.get("observations") {
            flagged.extend(
                obs.iter()
                    .filter_map(|o| o.get("code").and_then(Json::as_str))
                    .filter(|c| policy.is_forbidden(c))
                    .map(str::to_string),
            );
        }
    }
    if !flagged.is_empty() {
        return Err(InteropError::DirectIdentifier(flagged));
    }

    match format {
        CaseFormat::Flat => {
            let doc: FlatDocument = serde_json::from_value(raw).map_err(parse_err)?;
            let patient_pseudo_id = pseudo_id(doc.patient_pseudo_id)?;
            let mut variables = BTreeMap::new();
            for (name, entry) in doc.variables {
                let obs = match entry {
                    FlatEntry::Full {
                        value,
                        unit,
                        observed_at,
                    } => Observation {
                        value,
                        unit,
                        observed_at: parse_time(format, observed_at)?,
                    },
                    FlatEntry::Bare(value) => Observation {
                        value,
                        unit: None,
                        observed_at: None,
                    },
                };
                variables.insert(name, obs);
            }
            Ok(ClinicalCase {
                case_id: doc.case_id.unwrap_or_else(|| crate::ids::new_id("case")),
                patient_pseudo_id,
                variables,
                source_system: doc.source_system.unwrap_or_else(|| "unspecified".into()),
                ingested_at: now,
                recorded_at: parse_time(format, doc.recorded_at)?,
                provenance: Vec::new(),
            })
        }
        CaseFormat::ObservationBundle => {
            let doc: BundleDocument = serde_json::from_value(raw).map_err(parse_err)?;
            let patient_pseudo_id = pseudo_id(doc.patient_pseudo_id)?;
            let mut variables = BTreeMap::new();
            for o in doc.observations {
                let obs = Observation {
                    value: o.value,
                    unit: o.unit,
                    observed_at: parse_time(format, o.effective)?,
                };
                if variables.insert(o.code.clone(), obs).is_some() {
                    return Err(InteropError::DuplicateVariable(o.code));
                }
            }
            Ok(ClinicalCase {
                case_id: doc.case_id.unwrap_or_else(|| crate::ids::new_id("case")),
                patient_pseudo_id,
                variables,
                source_system: doc.source_system.unwrap_or_else(|| "unspecified".into()),
                ingested_at: now,
                recorded_at: parse_time(format, doc.recorded_at)?,
                provenance: Vec::new(),
            })
        }
    }
}

/// Parse a dataset: a JSON array of case documents, or one document per line.
pub fn ingest_dataset(
    document: &str,
    format: CaseFormat,
    policy: &IdentifierPolicy,
    now: DateTime<Utc>,
) -> Result<Vec<ClinicalCase>, InteropError> {
    let trimmed = document.trim_start();
    if trimmed.starts_with('[') {
        let docs: Vec<Json> = serde_json::from_str(trimmed).map_err(|e| InteropError::Parse {
            format,
            detail: e.to_string(),
        })?;
        docs.iter()
            .map(|d| ingest_case(&d.to_string(), format, policy, now))
            .collect()
    } else {
        trimmed
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| ingest_case(l, format, policy, now))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub variable: String,
    /// Unit to assume for the source value, replacing whatever it carried.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingProfile {
    pub service_id: String,
    /// External dotted path to model variable.
    pub entries: BTreeMap<String, ProfileEntry>,
}

impl MappingProfile {
    /// Maps every schema variable to itself.
    pub fn identity(service_id: &str, schema: &[VariableSpec]) -> Self {
        Self {
            service_id: service_id.to_string(),
            entries: schema
                .iter()
                .map(|v| {
                    (
                        v.name.clone(),
                        ProfileEntry {
                            variable: v.name.clone(),
                            unit: None,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Required model inputs that no entry maps to.
    pub fn missing_required(&self, schema: &[VariableSpec]) -> Vec<String> {
        let mapped: BTreeSet<&str> = self.entries.values().map(|e| e.variable.as_str()).collect();
        schema
            .iter()
            .filter(|v| v.required && !mapped.contains(v.name.as_str()))
            .map(|v| v.name.clone())
            .collect()
    }
}

/// Result of renaming a case through a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedCase {
    pub case: ClinicalCase,
    /// External entries with no profile entry; reported, never silently dropped.
    pub unrecognized: Vec<String>,
}

/// Rename external variables to model variables. Unknown entries are listed.
pub fn apply_profile(
    case: &ClinicalCase,
    profile: &MappingProfile,
) -> Result<MappedCase, InteropError> {
    let mut variables = BTreeMap::new();
    let mut unrecognized = Vec::new();
    for (path, obs) in &case.variables {
        match profile.entries.get(path) {
            Some(entry) => {
                let mut obs = obs.clone();
                if let Some(unit) = &entry.unit {
                    obs.unit = Some(unit.clone());
                }
                if variables.insert(entry.variable.clone(), obs).is_some() {
                    return Err(InteropError::DuplicateVariable(entry.variable.clone()));
                }
            }
            None => unrecognized.push(path.clone()),
        }
    }
    let mut mapped = case.clone();
    mapped.variables = variables;
    Ok(MappedCase {
        case: mapped,
        unrecognized,
    })
}

/// Rescale numeric variables to their schema units.
///
/// Collects every failure rather than stopping at the first, so the gateway can
/// report all of them as hard quality failures.
pub fn convert_units(
    case: &ClinicalCase,
    schema: &[VariableSpec],
    table: &UnitTable,
) -> Result<ClinicalCase, InteropError> {
    let mut out = case.clone();
    let mut failures = Vec::new();
    for spec in schema.iter().filter(|s| s.value_type == ValueType::Numeric) {
        let Some(obs) = out.variables.get_mut(&spec.name) else {
            continue;
        };
        let Some(value) = obs.value.as_f64() else {
            continue; // type mismatch is a quality failure, not a unit one
        };
        let Some(target) = spec.unit.as_deref() else {
            continue;
        };
        let Some(source) = obs.unit.clone() else {
            failures.push(ConversionFailure {
                variable: spec.name.clone(),
                detail: format!("value carries no unit (expected {target})"),
            });
            continue;
        };
        match table.convert(value, &source, target, Some(&spec.name)) {
            Ok(converted) => {
                let same_unit = table.canonical(&source) == table.canonical(target);
                if !same_unit {
                    out.provenance.push(format!(
                        "{}: {value} {source} -> {converted} {target}",
                        spec.name
                    ));
                }
                obs.value = Value::Number(converted);
                obs.unit = Some(target.to_string());
            }
            Err(e) => failures.push(ConversionFailure {
                variable: spec.name.clone(),
                detail: e.to_string(),
            }),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(InteropError::Conversion(failures))
    }
}

/// Profile mapping, unit normalization and required-input check in one step.
pub fn map_case(
    case: &ClinicalCase,
    profile: &MappingProfile,
    schema: &[VariableSpec],
    table: &UnitTable,
) -> Result<BTreeMap<String, Value>, InteropError> {
    let mapped = apply_profile(case, profile)?;
    let normalized = convert_units(&mapped.case, schema, table)?;
    let missing: Vec<String> = schema
        .iter()
        .filter(|s| s.required && !normalized.variables.contains_key(&s.name))
        .map(|s| s.name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(InteropError::UnmappedRequired(missing));
    }
    Ok(normalized.inputs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 6, 1, 10, 0, 0).unwrap()
    }

    fn schema() -> Vec<VariableSpec> {
        vec![
            VariableSpec::numeric("creatinine", "mg/dL", 0.2, 15.0),
            VariableSpec::numeric("age", "a", 65.0, 110.0),
            VariableSpec::categorical("sex", &["female", "male"]),
        ]
    }

    fn case(unit: &str, value: f64) -> ClinicalCase {
        let doc = format!(
            r#"{{"patient_pseudo_id":"p-1","variables":{{"creatinine":{{"value":{value},"unit":"{unit}"}},"age":{{"value":80,"unit":"a"}},"sex":"female"}}}}"#
        );
        ingest_case(&doc, CaseFormat::Flat, &IdentifierPolicy::default(), now()).unwrap()
    }

    #[test]
    fn flat_ingestion_keeps_every_variable() {
        let c = case("mg/dL", 1.1);
        assert_eq!(c.variables.len(), 3);
        assert_eq!(c.value("sex"), Some(&Value::Text("female".into())));
        assert_eq!(c.ingested_at, now());
    }

    #[test]
    fn micromolar_creatinine_is_normalized() {
        let out = convert_units(&case("umol/L", 88.4), &schema(), UnitTable::shipped()).unwrap();
        let v = out.value("creatinine").unwrap().as_f64().unwrap();
        assert!((v - 88.4e-6 * 113.12 / 0.01).abs() < 1e-12);
        assert_eq!(out.variables["creatinine"].unit.as_deref(), Some("mg/dL"));
        assert_eq!(out.provenance.len(), 1);
    }

    #[test]
    fn schema_unit_is_identity() {
        let c = case("mg/dL", 1.3);
        let out = convert_units(&c, &schema(), UnitTable::shipped()).unwrap();
        assert_eq!(out.variables, c.variables);
        assert!(out.provenance.is_empty());
    }

    #[test]
    fn unknown_unit_names_the_variable() {
        let err =
            convert_units(&case("furlongs", 3.0), &schema(), UnitTable::shipped()).unwrap_err();
        match err {
            InteropError::Conversion(f) => {
                assert_eq!(f.len(), 1);
                assert_eq!(f[0].variable, "creatinine");
                assert!(f[0].detail.contains("furlongs"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn direct_identifiers_and_missing_pseudonym_rejected() {
        let policy = IdentifierPolicy::default();
        let doc = r#"{"patient_pseudo_id":"p","variables":{"patient_name":"Ana","age":80}}"#;
        assert_eq!(
            ingest_case(doc, CaseFormat::Flat, &policy, now()),
            Err(InteropError::DirectIdentifier(vec!["patient_name".into()]))
        );
        let doc = r#"{"variables":{"age":80}}"#;
        assert_eq!(
            ingest_case(doc, CaseFormat::Flat, &policy, now()),
            Err(InteropError::MissingPseudoId)
        );
        let doc = r#"{"patient_pseudo_id":"p","observations":[{"code":"demographics.national_id","value":"X"}]}"#;
        assert!(matches!(
            ingest_case(doc, CaseFormat::ObservationBundle, &policy, now()),
            Err(InteropError::DirectIdentifier(_))
        ));
        assert!(matches!(
            "hl7v9".parse::<CaseFormat>(),
            Err(InteropError::UnknownFormat(_))
        ));
        assert!(matches!(
            ingest_case("{not json", CaseFormat::Flat, &policy, now()),
            Err(InteropError::Parse { .. })
        ));
    }

    #[test]
    fn bundle_maps_through_profile_and_reports_unrecognized() {
        let doc = r#"{"patient_pseudo_id":"p-2","source_system":"lis","observations":[
            {"code":"lab.creatinine","value":97.2,"unit":"umol/L","effective":"2025-05-30T07:00:00Z"},
            {"code":"demo.age_years","value":77},
            {"code":"demo.sex","value":"male"},
            {"code":"lab.sodium","value":139,"unit":"mmol/L"}]}"#;
        let c = ingest_case(
            doc,
            CaseFormat::ObservationBundle,
            &IdentifierPolicy::default(),
            now(),
        )
        .unwrap();
        assert_eq!(c.variables.len(), 4);
        let profile = MappingProfile {
            service_id: "svc".into(),
            entries: [
                ("lab.creatinine", "creatinine", None),
                ("demo.age_years", "age", Some("a")),
                ("demo.sex", "sex", None),
            ]
            .into_iter()
            .map(|(p, v, u)| {
                (
                    p.to_string(),
                    ProfileEntry {
                        variable: v.to_string(),
                        unit: u.map(str::to_string),
                    },
                )
            })
            .collect(),
        };
        assert!(profile.missing_required(&schema()).is_empty());
        let mapped = apply_profile(&c, &profile).unwrap();
        assert_eq!(mapped.unrecognized, vec!["lab.sodium".to_string()]);
        assert_eq!(
            mapped.case.variables.len() + mapped.unrecognized.len(),
            c.variables.len()
        );
        let inputs = map_case(&c, &profile, &schema(), UnitTable::shipped()).unwrap();
        assert!((inputs["creatinine"].as_f64().unwrap() - 97.2e-4 * 113.12).abs() < 1e-12);

        let mut partial = profile.clone();
        partial.entries.remove("demo.age_years");
        assert_eq!(partial.missing_required(&schema()), vec!["age".to_string()]);
        assert_eq!(
            map_case(&c, &partial, &schema(), UnitTable::shipped()),
            Err(InteropError::UnmappedRequired(vec!["age".into()]))
        );
    }

    proptest! {
        #[test]
        fn convert_is_idempotent(v in 1.0f64..2000.0) {
            let once = convert_units(&case("umol/L", v), &schema(), UnitTable::shipped()).unwrap();
            let twice = convert_units(&once, &schema(), UnitTable::shipped()).unwrap();
            prop_assert_eq!(&once.variables, &twice.variables);
        }
    }
}

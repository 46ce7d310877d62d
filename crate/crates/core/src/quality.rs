//! Data quality assessment of single cases and datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::DateTime;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest::canonical_json;
use crate::interop::{ClinicalCase, ConversionFailure, Value};
use crate::registry::{DeclaredDimension, ValueType, VariableSpec};
use crate::stats::{psi_samples, PSI_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Completeness,
    Consistency,
    Uniqueness,
    Correctness,
    TemporalStability,
    MultiSourceStability,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimensionScore {
    Score(f64),
    NotApplicable,
}

impl DimensionScore {
    pub fn value(self) -> Option<f64> {
        match self {
            DimensionScore::Score(v) => Some(v),
            DimensionScore::NotApplicable => None,
        }
    }
}

const NOT_APPLICABLE: &str = "not_applicable";

impl Serialize for DimensionScore {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            DimensionScore::Score(v) => s.serialize_f64(*v),
            DimensionScore::NotApplicable => s.serialize_str(NOT_APPLICABLE),
        }
    }
}

impl<'de> Deserialize<'de> for DimensionScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(DimensionScore::Score(v)),
            Raw::Text(t) if t == NOT_APPLICABLE => Ok(DimensionScore::NotApplicable),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "bad dimension score `{t}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Missing,
    WrongType,
    OutOfRange,
    NotInCategories,
    UnitConversion,
    Consistency,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Check::Missing => "missing",
            Check::WrongType => "wrong_type",
            Check::OutOfRange => "out_of_range",
            Check::NotInCategories => "not_in_categories",
            Check::UnitConversion => "unit_conversion",
            Check::Consistency => "consistency",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardFailure {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub variable: String,
    pub check: Check,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Case,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub target: String,
    pub target_kind: TargetKind,
    pub dimension_scores: BTreeMap<Dimension, DimensionScore>,
    #[serde(default)]
    pub declared_dimensions: BTreeMap<DeclaredDimension, String>,
    pub hard_failures: Vec<HardFailure>,
    pub overall: f64,
    pub verdict: Verdict,
}

impl QualityReport {
    fn finish(
        target: String,
        target_kind: TargetKind,
        dimension_scores: BTreeMap<Dimension, DimensionScore>,
        hard_failures: Vec<HardFailure>,
    ) -> Self {
        let overall = dimension_scores
            .values()
            .filter_map(|s| s.value())
            .fold(1.0f64, f64::min);
        let verdict = if hard_failures.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Block
        };
        Self {
            target,
            target_kind,
            dimension_scores,
            declared_dimensions: BTreeMap::new(),
            hard_failures,
            overall,
            verdict,
        }
    }

    pub fn with_declared(mut self, declared: &BTreeMap<DeclaredDimension, String>) -> Self {
        self.declared_dimensions = declared.clone();
        self
    }

    /// Unit conversion failures found before assessment; each blocks.
    pub fn with_conversion_failures(mut self, failures: &[ConversionFailure]) -> Self {
        for f in failures {
            self.hard_failures.push(HardFailure {
                case_id: None,
                variable: f.variable.clone(),
                check: Check::UnitConversion,
                detail: f.detail.clone(),
            });
        }
        if !self.hard_failures.is_empty() {
            self.verdict = Verdict::Block;
        }
        self
    }

    pub fn score(&self, d: Dimension) -> Option<DimensionScore> {
        self.dimension_scores.get(&d).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl Comparison {
    fn holds(self, o: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Comparison::Lt => o == Less,
            Comparison::Le => o != Greater,
            Comparison::Gt => o == Greater,
            Comparison::Ge => o != Less,
            Comparison::Eq => o == Equal,
            Comparison::Ne => o != Equal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Constant(f64),
    Variable(String),
}

/// `left <op> right`. Applies only when both sides are present and
/// comparable (both numbers, or both timestamps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyRule {
    pub name: String,
    pub left: String,
    pub op: Comparison,
    pub right: Operand,
}

#[derive(Debug, PartialEq, PartialOrd)]
enum Comparable {
    Num(f64),
    Time(i64),
}

fn comparable(v: &Value) -> Option<Comparable> {
    match v {
        Value::Number(n) => Some(Comparable::Num(*n)),
        Value::Text(t) => {
            crate::timefmt::parse_datetime(t).map(|t| Comparable::Time(t.timestamp_millis()))
        }
        Value::Bool(_) => None,
    }
}

impl ConsistencyRule {
    /// `None` when the rule does not apply to this case.
    pub fn evaluate(&self, case: &ClinicalCase) -> Option<bool> {
        let left = comparable(case.value(&self.left)?)?;
        let right = match &self.right {
            Operand::Constant(c) => Comparable::Num(*c),
            Operand::Variable(name) => comparable(case.value(name)?)?,
        };
        let ord = match (&left, &right) {
            (Comparable::Num(a), Comparable::Num(b)) => a.partial_cmp(b)?,
            (Comparable::Time(a), Comparable::Time(b)) => a.cmp(b),
            _ => return None,
        };
        Some(self.op.holds(ord))
    }
}

/// Rules shipped for the reference deployment.
pub fn default_rules() -> Vec<ConsistencyRule> {
    serde_json::from_str(include_str!("../fixtures/consistency_rules.json"))
        .expect("shipped rules parse")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QualityError {
    #[error("schema has no variables")]
    EmptySchema,
    #[error("dataset is empty")]
    EmptyDataset,
}

struct CaseChecks {
    required: usize,
    required_present: usize,
    checked: usize,
    correct: usize,
    rules_applied: usize,
    rules_held: usize,
    failures: Vec<HardFailure>,
}

/// Type, range and category check of one value against its spec.
pub fn check_value(spec: &VariableSpec, value: &Value) -> Option<(Check, String)> {
    match spec.value_type {
        ValueType::Numeric => {
            let Some(x) = value.as_f64() else {
                return Some((Check::WrongType, format!("expected a number, got {value}")));
            };
            if !x.is_finite() {
                return Some((Check::WrongType, "value is not finite".into()));
            }
            if let Some([lo, hi]) = spec.valid_range {
                if x < lo || x > hi {
                    let unit = spec.unit.as_deref().unwrap_or("");
                    return Some((
                        Check::OutOfRange,
                        format!("{x} outside [{lo}, {hi}] {unit}")
                            .trim_end()
                            .to_string(),
                    ));
                }
            }
            None
        }
        ValueType::Categorical => {
            let Some(t) = value.as_str() else {
                return Some((
                    Check::WrongType,
                    format!("expected a category, got {value}"),
                ));
            };
            match &spec.categories {
                Some(cats) if !cats.iter().any(|c| c == t) => Some((
                    Check::NotInCategories,
                    format!("`{t}` not in {{{}}}", cats.join(", ")),
                )),
                _ => None,
            }
        }
        ValueType::Datetime => match value.as_str().and_then(crate::timefmt::parse_datetime) {
            Some(_) => None,
            None => Some((
                Check::WrongType,
                format!("expected a timestamp, got {value}"),
            )),
        },
        ValueType::Boolean => value
            .as_bool()
            .is_none()
            .then(|| (Check::WrongType, format!("expected a boolean, got {value}"))),
    }
}

fn run_checks(
    case: &ClinicalCase,
    schema: &[VariableSpec],
    rules: &[ConsistencyRule],
) -> CaseChecks {
    let mut c = CaseChecks {
        required: 0,
        required_present: 0,
        checked: 0,
        correct: 0,
        rules_applied: 0,
        rules_held: 0,
        failures: Vec::new(),
    };
    for spec in schema {
        let value = case.value(&spec.name);
        if spec.required {
            c.required += 1;
            if value.is_some() {
                c.required_present += 1;
            } else {
                c.failures.push(HardFailure {
                    case_id: None,
                    variable: spec.name.clone(),
                    check: Check::Missing,
                    detail: "required variable absent".into(),
                });
            }
        }
        if let Some(value) = value {
            c.checked += 1;
            match check_value(spec, value) {
                None => c.correct += 1,
                Some((check, detail)) => c.failures.push(HardFailure {
                    case_id: None,
                    variable: spec.name.clone(),
                    check,
                    detail,
                }),
            }
        }
    }
    for rule in rules {
        if let Some(held) = rule.evaluate(case) {
            c.rules_applied += 1;
            if held {
                c.rules_held += 1;
            } else {
                c.failures.push(HardFailure {
                    case_id: None,
                    variable: rule.left.clone(),
                    check: Check::Consistency,
                    detail: format!("rule `{}` violated", rule.name),
                });
            }
        }
    }
    c
}

fn ratio(num: usize, den: usize) -> DimensionScore {
    if den == 0 {
        DimensionScore::NotApplicable
    } else {
        DimensionScore::Score(num as f64 / den as f64)
    }
}

/// Assess one normalized case. Pure.
pub fn assess_case(
    case: &ClinicalCase,
    schema: &[VariableSpec],
    rules: &[ConsistencyRule],
) -> Result<QualityReport, QualityError> {
    if schema.is_empty() {
        return Err(QualityError::EmptySchema);
    }
    let c = run_checks(case, schema, rules);
    let scores = BTreeMap::from([
        (
            Dimension::Completeness,
            ratio(c.required_present, c.required),
        ),
        (Dimension::Correctness, ratio(c.correct, c.checked)),
        (Dimension::Consistency, ratio(c.rules_held, c.rules_applied)),
    ]);
    Ok(QualityReport::finish(
        case.case_id.clone(),
        TargetKind::Case,
        scores,
        c.failures,
    ))
}

fn duplicate_key(case: &ClinicalCase) -> String {
    let values: BTreeMap<&str, (&Value, Option<&str>)> = case
        .variables
        .iter()
        .map(|(k, o)| (k.as_str(), (&o.value, o.unit.as_deref())))
        .collect();
    canonical_json(&(&case.patient_pseudo_id, values))
}

fn numeric_column<'a>(cases: impl Iterator<Item = &'a ClinicalCase>, name: &str) -> Vec<f64> {
    cases
        .filter_map(|c| c.value(name).and_then(Value::as_f64))
        .collect()
}

fn stability(psis: &[f64]) -> DimensionScore {
    match crate::num::mean(psis) {
        None => DimensionScore::NotApplicable,
        Some(m) => DimensionScore::Score(1.0 - m.min(1.0)),
    }
}

/// Mean PSI across numeric variables between the first and second half of the
/// time-ordered dataset.
pub fn temporal_psi(cases: &[ClinicalCase], schema: &[VariableSpec]) -> Vec<f64> {
    let times: BTreeSet<DateTime<chrono::Utc>> =
        cases.iter().map(ClinicalCase::timestamp).collect();
    if times.len() < 2 {
        return Vec::new();
    }
    let mut ordered: Vec<&ClinicalCase> = cases.iter().collect();
    ordered.sort_by_cached_key(|c| (c.timestamp(), c.case_id.clone(), duplicate_key(c)));
    let (first, second) = ordered.split_at(ordered.len() / 2);
    schema
        .iter()
        .filter(|s| s.value_type == ValueType::Numeric)
        .filter_map(|s| {
            let a = numeric_column(first.iter().copied(), &s.name);
            let b = numeric_column(second.iter().copied(), &s.name);
            psi_samples(&a, &b, PSI_BINS)
        })
        .collect()
}

/// PSI of each source against the pooled remaining sources, per numeric variable.
pub fn multi_source_psi(cases: &[ClinicalCase], schema: &[VariableSpec]) -> Vec<f64> {
    let sources: BTreeSet<&str> = cases.iter().map(|c| c.source_system.as_str()).collect();
    if sources.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for spec in schema.iter().filter(|s| s.value_type == ValueType::Numeric) {
        for src in &sources {
            let own = numeric_column(cases.iter().filter(|c| c.source_system == *src), &spec.name);
            let rest = numeric_column(cases.iter().filter(|c| c.source_system != *src), &spec.name);
            out.extend(psi_samples(&rest, &own, PSI_BINS));
        }
    }
    out
}

pub fn assess_dataset(
    dataset_id: &str,
    cases: &[ClinicalCase],
    schema: &[VariableSpec],
    rules: &[ConsistencyRule],
) -> Result<QualityReport, QualityError> {
    if schema.is_empty() {
        return Err(QualityError::EmptySchema);
    }
    if cases.is_empty() {
        return Err(QualityError::EmptyDataset);
    }
    // Canonical order, so float sums do not depend on input order.
    let mut sorted: Vec<ClinicalCase> = cases.to_vec();
    sorted.sort_by_cached_key(|c| (c.timestamp(), c.case_id.clone(), duplicate_key(c)));
    let cases = sorted.as_slice();
    let mut completeness = Vec::new();
    let mut correctness = Vec::new();
    let mut consistency = Vec::new();
    let mut failures = Vec::new();
    for case in cases {
        let c = run_checks(case, schema, rules);
        completeness.extend(ratio(c.required_present, c.required).value());
        correctness.extend(ratio(c.correct, c.checked).value());
        consistency.extend(ratio(c.rules_held, c.rules_applied).value());
        failures.extend(c.failures.into_iter().map(|mut f| {
            f.case_id = Some(case.case_id.clone());
            f
        }));
    }
    let mean = |xs: &[f64]| {
        crate::num::mean(xs).map_or(DimensionScore::NotApplicable, DimensionScore::Score)
    };
    let distinct: BTreeSet<String> = cases.iter().map(duplicate_key).collect();
    let duplicates = cases.len() - distinct.len();
    let scores = BTreeMap::from([
        (Dimension::Completeness, mean(&completeness)),
        (Dimension::Correctness, mean(&correctness)),
        (Dimension::Consistency, mean(&consistency)),
        (
            Dimension::Uniqueness,
            DimensionScore::Score(1.0 - duplicates as f64 / cases.len() as f64),
        ),
        (
            Dimension::TemporalStability,
            stability(&temporal_psi(cases, schema)),
        ),
        (
            Dimension::MultiSourceStability,
            stability(&multi_source_psi(cases, schema)),
        ),
    ]);
    Ok(QualityReport::finish(
        dataset_id.to_string(),
        TargetKind::Dataset,
        scores,
        failures,
    ))
}

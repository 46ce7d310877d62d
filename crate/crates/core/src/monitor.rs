//! Ground truth, windowed performance snapshots and drift alerts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, TimeDelta, Utc, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interop::Value;
use crate::num::Scalar;
use crate::stats::{auc, brier, Confusion};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_N: usize = 10;
pub const DEFAULT_DRIFT_DELTA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub job_id: String,
    pub service_id: String,
    /// Observed outcome per clinical endpoint.
    pub outcomes: BTreeMap<String, bool>,
    pub submitted_by: String,
    #[serde(with = "crate::timefmt::millis")]
    pub submitted_at: DateTime<Utc>,
}

/// Outcome as submitted: one value for single-endpoint services, or a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutcomeInput {
    PerEndpoint(BTreeMap<String, Value>),
    Single(Value),
}

fn as_outcome(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::Number(n) if *n == 0.0 || *n == 1.0 => Some(*n == 1.0),
        _ => None,
    }
}

impl OutcomeInput {
    pub fn resolve(&self, endpoints: &[String]) -> Result<BTreeMap<String, bool>, MonitorError> {
        let raw: BTreeMap<String, Value> = match self {
            OutcomeInput::Single(v) => match endpoints {
                [only] => BTreeMap::from([(only.clone(), v.clone())]),
                _ => return Err(MonitorError::AmbiguousOutcome),
            },
            OutcomeInput::PerEndpoint(m) => m.clone(),
        };
        if raw.is_empty() {
            return Err(MonitorError::AmbiguousOutcome);
        }
        raw.into_iter()
            .map(|(k, v)| {
                if !endpoints.contains(&k) {
                    return Err(MonitorError::UnknownEndpoint(k));
                }
                as_outcome(&v)
                    .map(|b| (k.clone(), b))
                    .ok_or(MonitorError::BadOutcome { endpoint: k })
            })
            .collect()
    }
}

/// Half-open time interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub label: String,
    #[serde(with = "crate::timefmt::millis")]
    pub start: DateTime<Utc>,
    #[serde(with = "crate::timefmt::millis")]
    pub end: DateTime<Utc>,
}

impl Window {
    /// The ISO week containing `t`.
    pub fn iso_week_of(t: DateTime<Utc>) -> Self {
        let w = t.iso_week();
        Self::iso_week(w.year(), w.week()).expect("week of an existing date")
    }

    pub fn iso_week(year: i32, week: u32) -> Option<Self> {
        let monday = NaiveDate::from_isoywd_opt(year, week, Weekday::Mon)?;
        let start = monday.and_hms_opt(0, 0, 0)?.and_utc();
        Some(Self {
            label: format!("{year}-W{week:02}"),
            start,
            end: start + TimeDelta::days(7),
        })
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl FromStr for Window {
    type Err = MonitorError;

    /// `2025-W23`, or `2025-06-01..2025-07-01` (end exclusive).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MonitorError::BadWindow(s.to_string());
        if let Some((y, w)) = s.split_once("-W") {
            let year: i32 = y.parse().map_err(|_| bad())?;
            let week: u32 = w.parse().map_err(|_| bad())?;
            return Window::iso_week(year, week).ok_or_else(bad);
        }
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let start = crate::timefmt::parse_datetime(a).ok_or_else(bad)?;
        let end = crate::timefmt::parse_datetime(b).ok_or_else(bad)?;
        if end <= start {
            return Err(bad());
        }
        Ok(Window {
            label: s.to_string(),
            start,
            end,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics<T = f64> {
    pub accuracy: Option<T>,
    pub sensitivity: Option<T>,
    pub specificity: Option<T>,
    pub auc: Option<T>,
    pub brier: Option<T>,
}

impl<T: Scalar> Metrics<T> {
    pub fn compute(scores: &[T], labels: &[bool], threshold: T) -> Self {
        let c = Confusion::at(scores, labels, threshold);
        Self {
            accuracy: c.accuracy(),
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
            auc: auc(scores, labels),
            brier: brier(scores, labels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MetricSet {
    Computed(Metrics),
    InsufficientData { n: usize, minimum: usize },
}

impl MetricSet {
    pub fn of(scores: &[f64], labels: &[bool], threshold: f64, min_n: usize) -> Self {
        if scores.len() < min_n {
            MetricSet::InsufficientData {
                n: scores.len(),
                minimum: min_n,
            }
        } else {
            MetricSet::Computed(Metrics::compute(scores, labels, threshold))
        }
    }

    pub fn metrics(&self) -> Option<&Metrics> {
        match self {
            MetricSet::Computed(m) => Some(m),
            MetricSet::InsufficientData { .. } => None,
        }
    }
}

/// One prediction paired with its observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub job_id: String,
    pub score: f64,
    pub outcome: bool,
    #[serde(with = "crate::timefmt::millis")]
    pub predicted_at: DateTime<Utc>,
    /// Categorical case attributes used for subgroup breakdowns.
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSnapshot {
    pub snapshot_id: String,
    pub service_id: String,
    pub endpoint: String,
    pub passport_version: u64,
    pub window: Window,
    pub n: usize,
    pub threshold: f64,
    pub metrics: MetricSet,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_subgroup: BTreeMap<String, BTreeMap<String, MetricSet>>,
    #[serde(with = "crate::timefmt::millis")]
    pub computed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub threshold: f64,
    pub min_n: usize,
    pub drift_delta: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_n: DEFAULT_MIN_N,
            drift_delta: DEFAULT_DRIFT_DELTA,
        }
    }
}

pub struct SnapshotInput<'a> {
    pub snapshot_id: String,
    pub service_id: &'a str,
    pub endpoint: &'a str,
    pub passport_version: u64,
    pub window: Window,
    pub computed_at: DateTime<Utc>,
}

/// Metrics over the pairs predicted inside the window. Pure; pairs are put in
/// job order first so recomputation is bit-identical.
pub fn compute_snapshot(
    input: SnapshotInput<'_>,
    pairs: &[Pair],
    config: &MonitorConfig,
) -> PerformanceSnapshot {
    let mut inside: Vec<&Pair> = pairs
        .iter()
        .filter(|p| input.window.contains(p.predicted_at))
        .collect();
    inside.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    let scores: Vec<f64> = inside.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = inside.iter().map(|p| p.outcome).collect();
    let mut groups: BTreeMap<String, BTreeMap<String, (Vec<f64>, Vec<bool>)>> = BTreeMap::new();
    for p in &inside {
        for (attr, g) in &p.attributes {
            let e = groups
                .entry(attr.clone())
                .or_default()
                .entry(g.clone())
                .or_default();
            e.0.push(p.score);
            e.1.push(p.outcome);
        }
    }
    let per_subgroup = groups
        .into_iter()
        .map(|(attr, gs)| {
            let sets = gs
                .into_iter()
                .map(|(g, (s, l))| (g, MetricSet::of(&s, &l, config.threshold, config.min_n)))
                .collect();
            (attr, sets)
        })
        .collect();
    PerformanceSnapshot {
        snapshot_id: input.snapshot_id,
        service_id: input.service_id.to_string(),
        endpoint: input.endpoint.to_string(),
        passport_version: input.passport_version,
        window: input.window,
        n: inside.len(),
        threshold: config.threshold,
        metrics: MetricSet::of(&scores, &labels, config.threshold, config.min_n),
        per_subgroup,
        computed_at: input.computed_at,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMetric {
    Auc,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftReference {
    Declared,
    TrailingMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFinding {
    pub metric: DriftMetric,
    pub reference: DriftReference,
    pub reference_value: f64,
    pub observed: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAlert {
    pub service_id: String,
    pub endpoint: String,
    pub snapshot_id: String,
    pub window: String,
    pub delta: f64,
    pub findings: Vec<DriftFinding>,
}

fn pick(m: &Metrics, metric: DriftMetric) -> Option<f64> {
    match metric {
        DriftMetric::Auc => m.auc,
        DriftMetric::Accuracy => m.accuracy,
    }
}

/// Compare the latest snapshot of one endpoint against the declared baseline
/// and the mean of the earlier snapshots. `history` is in chronological order.
pub fn detect_drift(
    history: &[PerformanceSnapshot],
    declared: Option<&crate::registry::DeclaredPerformance>,
    delta: f64,
) -> Option<DriftAlert> {
    if history.len() < 2 {
        return None;
    }
    let (latest, earlier) = history.split_last()?;
    let current = latest.metrics.metrics()?;
    let mut findings = Vec::new();
    for metric in [DriftMetric::Auc, DriftMetric::Accuracy] {
        let Some(observed) = pick(current, metric) else {
            continue;
        };
        let declared_value = declared.and_then(|d| match metric {
            DriftMetric::Auc => d.auc,
            DriftMetric::Accuracy => d.accuracy,
        });
        let previous: Vec<f64> = earlier
            .iter()
            .filter_map(|s| s.metrics.metrics().and_then(|m| pick(m, metric)))
            .collect();
        let trailing = crate::num::mean(&previous);
        for (reference, value) in [
            (DriftReference::Declared, declared_value),
            (DriftReference::TrailingMean, trailing),
        ] {
            if let Some(reference_value) = value {
                let drop = reference_value - observed;
                if drop > delta {
                    findings.push(DriftFinding {
                        metric,
                        reference,
                        reference_value,
                        observed,
                        drop,
                    });
                }
            }
        }
    }
    (!findings.is_empty()).then(|| DriftAlert {
        service_id: latest.service_id.clone(),
        endpoint: latest.endpoint.clone(),
        snapshot_id: latest.snapshot_id.clone(),
        window: latest.window.label.clone(),
        delta,
        findings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("ground truth already recorded for job `{0}`")]
    Duplicate(String),
    #[error("outcome must name its endpoint for multi-endpoint services")]
    AmbiguousOutcome,
    #[error("`{0}` is not a clinical endpoint of this service")]
    UnknownEndpoint(String),
    #[error("outcome for `{endpoint}` must be a boolean or 0/1")]
    BadOutcome { endpoint: String },
    #[error("bad window `{0}`; expected YYYY-Www or start..end")]
    BadWindow(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    ground_truth: BTreeMap<String, GroundTruthRecord>,
    snapshots: Vec<PerformanceSnapshot>,
    alerts: Vec<DriftAlert>,
}

impl Monitor {
    pub fn has_ground_truth(&self, job_id: &str) -> bool {
        self.ground_truth.contains_key(job_id)
    }

    pub fn ground_truth(&self, job_id: &str) -> Option<&GroundTruthRecord> {
        self.ground_truth.get(job_id)
    }

    pub fn ground_truths(&self, service_id: &str) -> impl Iterator<Item = &GroundTruthRecord> {
        let service_id = service_id.to_string();
        self.ground_truth
            .values()
            .filter(move |g| g.service_id == service_id)
    }

    pub fn record_ground_truth(&mut self, record: GroundTruthRecord) -> Result<(), MonitorError> {
        if self.has_ground_truth(&record.job_id) {
            return Err(MonitorError::Duplicate(record.job_id));
        }
        self.ground_truth.insert(record.job_id.clone(), record);
        Ok(())
    }

    pub fn push_snapshot(&mut self, s: PerformanceSnapshot) {
        self.snapshots.push(s);
    }

    pub fn snapshots(&self, service_id: &str) -> Vec<&PerformanceSnapshot> {
        self.snapshots
            .iter()
            .filter(|s| s.service_id == service_id)
            .collect()
    }

    /// Chronological by window start, then computation time.
    pub fn endpoint_history(&self, service_id: &str, endpoint: &str) -> Vec<PerformanceSnapshot> {
        let mut h: Vec<PerformanceSnapshot> = self
            .snapshots
            .iter()
            .filter(|s| s.service_id == service_id && s.endpoint == endpoint)
            .cloned()
            .collect();
        h.sort_by_key(|a| (a.window.start, a.computed_at));
        h
    }

    pub fn push_alert(&mut self, a: DriftAlert) {
        self.alerts.push(a);
    }

    pub fn alerts(&self, service_id: &str) -> Vec<&DriftAlert> {
        self.alerts
            .iter()
            .filter(|a| a.service_id == service_id)
            .collect()
    }
}

//! Subgroup disparity testing and bias declarations.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::num::Scalar;
use crate::stats::{auc, Confusion};

pub const DEFAULT_MIN_GROUP_N: usize = 5;

/// One scored, labeled case with its subgroup attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow<T = f64> {
    pub attributes: BTreeMap<String, String>,
    pub score: T,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics<T = f64> {
    pub n: usize,
    /// Fewer than the minimum group size; measures include the group but
    /// should be read with care.
    pub insufficient_n: bool,
    pub positive_rate: T,
    pub tpr: Option<T>,
    pub fpr: Option<T>,
    pub auc: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport<T = f64> {
    pub groups: BTreeMap<String, GroupMetrics<T>>,
    /// `None` when fewer than two groups define the measure.
    pub demographic_parity_difference: Option<T>,
    pub equalized_odds_gap: Option<T>,
    pub auc_gap: Option<T>,
}

fn max_pairwise_gap<T: Scalar>(values: impl Iterator<Item = Option<T>>) -> Option<T> {
    let defined: Vec<T> = values.flatten().collect();
    if defined.len() < 2 {
        return None;
    }
    let lo = defined.iter().copied().fold(T::infinity(), T::min);
    let hi = defined.iter().copied().fold(T::neg_infinity(), T::max);
    Some(hi - lo)
}

/// Disparity measures for one attribute. Rows lacking the attribute are skipped.
pub fn attribute_report<T: Scalar>(
    attribute: &str,
    rows: &[LabeledRow<T>],
    threshold: T,
    min_group_n: usize,
) -> AttributeReport<T> {
    let mut by_group: BTreeMap<&str, (Vec<T>, Vec<bool>)> = BTreeMap::new();
    for r in rows {
        if let Some(g) = r.attributes.get(attribute) {
            let e = by_group.entry(g.as_str()).or_default();
            e.0.push(r.score);
            e.1.push(r.label);
        }
    }
    let groups: BTreeMap<String, GroupMetrics<T>> = by_group
        .into_iter()
        .map(|(g, (scores, labels))| {
            let c = Confusion::at(&scores, &labels, threshold);
            (
                g.to_string(),
                GroupMetrics {
                    n: scores.len(),
                    insufficient_n: scores.len() < min_group_n,
                    positive_rate: c.positive_rate().expect("group is non-empty"),
                    tpr: c.sensitivity(),
                    fpr: c.false_positive_rate(),
                    auc: auc(&scores, &labels),
                },
            )
        })
        .collect();
    let dpd = max_pairwise_gap(groups.values().map(|g| Some(g.positive_rate)));
    let tpr_gap = max_pairwise_gap(groups.values().map(|g| g.tpr));
    let fpr_gap = max_pairwise_gap(groups.values().map(|g| g.fpr));
    let eo = match (tpr_gap, fpr_gap) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    AttributeReport {
        demographic_parity_difference: dpd,
        equalized_odds_gap: eo,
        auc_gap: max_pairwise_gap(groups.values().map(|g| g.auc)),
        groups,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Declared,
    Tested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub report_id: String,
    pub service_id: String,
    pub endpoint: String,
    pub mode: BiasMode,
    pub declared_limitations: Vec<String>,
    pub n: usize,
    pub threshold: f64,
    pub min_group_n: usize,
    pub per_attribute: BTreeMap<String, AttributeReport>,
    pub missing_attributes: BTreeSet<String>,
    #[serde(with = "crate::timefmt::millis")]
    pub computed_at: DateTime<Utc>,
}

pub struct BiasTestInput<'a> {
    pub report_id: String,
    pub service_id: &'a str,
    pub endpoint: &'a str,
    /// Attributes to test, typically the passport's demographic attributes.
    pub attributes: &'a BTreeSet<String>,
    /// Attributes declared absent from the training data.
    pub known_absent: &'a BTreeSet<String>,
    pub declared_limitations: &'a [String],
    pub threshold: f64,
    pub min_group_n: usize,
    pub computed_at: DateTime<Utc>,
}

/// Limitation text for an attribute the data cannot speak to.
pub fn missing_attribute_note(attr: &str) -> String {
    format!("{attr} data is not available; bias on {attr} cannot be assessed")
}

pub fn run_bias_test(input: BiasTestInput<'_>, rows: &[LabeledRow]) -> BiasReport {
    let mut missing: BTreeSet<String> = input.known_absent.clone();
    let mut per_attribute = BTreeMap::new();
    for attr in input.attributes.iter().chain(input.known_absent) {
        if rows.iter().any(|r| r.attributes.contains_key(attr)) {
            missing.remove(attr);
            per_attribute.insert(
                attr.clone(),
                attribute_report(attr, rows, input.threshold, input.min_group_n),
            );
        } else {
            missing.insert(attr.clone());
        }
    }
    let mut declared_limitations = input.declared_limitations.to_vec();
    for attr in &missing {
        let note = missing_attribute_note(attr);
        if !declared_limitations.contains(&note) {
            declared_limitations.push(note);
        }
    }
    BiasReport {
        report_id: input.report_id,
        service_id: input.service_id.to_string(),
        endpoint: input.endpoint.to_string(),
        mode: BiasMode::Tested,
        declared_limitations,
        n: rows.len(),
        threshold: input.threshold,
        min_group_n: input.min_group_n,
        per_attribute,
        missing_attributes: missing,
        computed_at: input.computed_at,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasStore {
    reports: Vec<BiasReport>,
}

impl BiasStore {
    pub fn push(&mut self, r: BiasReport) {
        self.reports.push(r);
    }

    pub fn reports(&self, service_id: &str) -> Vec<&BiasReport> {
        self.reports
            .iter()
            .filter(|r| r.service_id == service_id)
            .collect()
    }

    pub fn get(&self, report_id: &str) -> Option<&BiasReport> {
        self.reports.iter().find(|r| r.report_id == report_id)
    }
}

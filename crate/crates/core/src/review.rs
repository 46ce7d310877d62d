//! Review sessions over retrospective or simulated cases.

use std::collections::BTreeMap;

use chrono::{DateTime, TimeDelta, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interop::Value;

/// Bounds, in days, of the random per-session time shift for retrospective cases.
pub const MIN_SHIFT_DAYS: i64 = 30;
pub const MAX_SHIFT_DAYS: i64 = 365;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseSource {
    Retrospective,
    Simulated,
}

/// An eligible case before anonymization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCase {
    pub inputs: BTreeMap<String, Value>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::timefmt::millis_opt"
    )]
    pub recorded_at: Option<DateTime<Utc>>,
    pub outcome: bool,
    pub model_prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub case: BTreeMap<String, Value>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::timefmt::millis_opt"
    )]
    pub case_time: Option<DateTime<Utc>>,
    pub known_outcome: bool,
    pub model_prediction: f64,
    pub user_estimate: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceReport {
    pub user_vs_truth: f64,
    pub model_vs_truth: f64,
    pub user_vs_model: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub user_id: String,
    pub service_id: String,
    pub endpoint: String,
    pub source: CaseSource,
    pub threshold: f64,
    pub items: Vec<ReviewItem>,
    pub state: SessionState,
    pub summary: Option<ConcordanceReport>,
    #[serde(with = "crate::timefmt::millis")]
    pub created_at: DateTime<Utc>,
}

/// What the reviewing user may see. Outcomes appear only once the session is
/// completed; the model prediction for an item only after it is answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItemView {
    pub index: usize,
    pub case: BTreeMap<String, Value>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::timefmt::millis_opt"
    )]
    pub case_time: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_estimate: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_prediction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_outcome: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSessionView {
    pub session_id: String,
    pub service_id: String,
    pub endpoint: String,
    pub source: CaseSource,
    pub threshold: f64,
    pub state: SessionState,
    pub items: Vec<ReviewItemView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ConcordanceReport>,
}

impl ReviewSession {
    pub fn view(&self) -> ReviewSessionView {
        let done = self.state == SessionState::Completed;
        ReviewSessionView {
            session_id: self.session_id.clone(),
            service_id: self.service_id.clone(),
            endpoint: self.endpoint.clone(),
            source: self.source,
            threshold: self.threshold,
            state: self.state,
            items: self
                .items
                .iter()
                .enumerate()
                .map(|(index, it)| {
                    let answered = it.user_estimate.is_some();
                    ReviewItemView {
                        index,
                        case: it.case.clone(),
                        case_time: it.case_time,
                        user_estimate: it.user_estimate,
                        model_prediction: answered.then_some(it.model_prediction),
                        known_outcome: done.then_some(it.known_outcome),
                    }
                })
                .collect(),
            summary: self.summary,
        }
    }

    pub fn answered(&self) -> usize {
        self.items
            .iter()
            .filter(|i| i.user_estimate.is_some())
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReviewError {
    #[error("pool holds {available} eligible cases, {requested} requested")]
    InsufficientPool { available: usize, requested: usize },
    #[error("session must contain at least one item")]
    Empty,
    #[error("review session `{0}` not found")]
    NotFound(String),
    #[error("session belongs to another user")]
    NotOwner,
    #[error("session is completed")]
    Completed,
    #[error("item {0} does not exist")]
    NoItem(usize),
    #[error("item {0} already answered")]
    AlreadyAnswered(usize),
    #[error("{0} items unanswered")]
    Unanswered(usize),
}

pub struct NewSession<'a> {
    pub session_id: String,
    pub user_id: &'a str,
    pub service_id: &'a str,
    pub endpoint: &'a str,
    pub source: CaseSource,
    pub n: usize,
    pub threshold: f64,
    pub now: DateTime<Utc>,
}

/// Sample `n` pool cases without replacement. Retrospective cases get a
/// random time shift shared by the whole session.
pub fn create_session<R: Rng>(
    new: NewSession<'_>,
    pool: &[PoolCase],
    rng: &mut R,
) -> Result<ReviewSession, ReviewError> {
    if new.n == 0 {
        return Err(ReviewError::Empty);
    }
    if pool.len() < new.n {
        return Err(ReviewError::InsufficientPool {
            available: pool.len(),
            requested: new.n,
        });
    }
    let shift_days = rng.random_range(MIN_SHIFT_DAYS..=MAX_SHIFT_DAYS)
        * if rng.random_bool(0.5) { 1 } else { -1 };
    let shift = TimeDelta::days(shift_days) + TimeDelta::minutes(rng.random_range(1..24 * 60));
    let items = rand::seq::index::sample(rng, pool.len(), new.n)
        .into_iter()
        .map(|i| {
            let c = &pool[i];
            ReviewItem {
                case: c.inputs.clone(),
                case_time: match new.source {
                    CaseSource::Retrospective => c.recorded_at.map(|t| t + shift),
                    CaseSource::Simulated => c.recorded_at,
                },
                known_outcome: c.outcome,
                model_prediction: c.model_prediction,
                user_estimate: None,
            }
        })
        .collect();
    Ok(ReviewSession {
        session_id: new.session_id,
        user_id: new.user_id.to_string(),
        service_id: new.service_id.to_string(),
        endpoint: new.endpoint.to_string(),
        source: new.source,
        threshold: new.threshold,
        items,
        state: SessionState::Open,
        summary: None,
        created_at: new.now,
    })
}

pub fn concordance(items: &[ReviewItem], threshold: f64) -> Option<ConcordanceReport> {
    let n = items.len();
    let mut counts = [0usize; 3];
    for it in items {
        let user = it.user_estimate?;
        let model = it.model_prediction >= threshold;
        counts[0] += (user == it.known_outcome) as usize;
        counts[1] += (model == it.known_outcome) as usize;
        counts[2] += (user == model) as usize;
    }
    (n > 0).then(|| ConcordanceReport {
        user_vs_truth: counts[0] as f64 / n as f64,
        model_vs_truth: counts[1] as f64 / n as f64,
        user_vs_model: counts[2] as f64 / n as f64,
        n,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reviews {
    sessions: BTreeMap<String, ReviewSession>,
}

impl Reviews {
    pub fn insert(&mut self, s: ReviewSession) {
        self.sessions.insert(s.session_id.clone(), s);
    }

    pub fn get(&self, id: &str) -> Option<&ReviewSession> {
        self.sessions.get(id)
    }

    pub fn sessions(&self, service_id: &str) -> impl Iterator<Item = &ReviewSession> {
        let s = service_id.to_string();
        self.sessions.values().filter(move |r| r.service_id == s)
    }

    /// Ownership and state checks shared by the mutating operations.
    pub fn open_session(&self, id: &str, user_id: &str) -> Result<&ReviewSession, ReviewError> {
        let s = self
            .get(id)
            .ok_or_else(|| ReviewError::NotFound(id.to_string()))?;
        if s.user_id != user_id {
            return Err(ReviewError::NotOwner);
        }
        if s.state == SessionState::Completed {
            return Err(ReviewError::Completed);
        }
        Ok(s)
    }

    pub fn check_estimate(&self, id: &str, user_id: &str, index: usize) -> Result<(), ReviewError> {
        let s = self.open_session(id, user_id)?;
        let item = s.items.get(index).ok_or(ReviewError::NoItem(index))?;
        if item.user_estimate.is_some() {
            return Err(ReviewError::AlreadyAnswered(index));
        }
        Ok(())
    }

    /// Returns the item view, now including the model prediction.
    pub fn record_estimate(
        &mut self,
        id: &str,
        user_id: &str,
        index: usize,
        estimate: bool,
    ) -> Result<ReviewItemView, ReviewError> {
        self.check_estimate(id, user_id, index)?;
        let s = self.sessions.get_mut(id).expect("checked");
        s.items[index].user_estimate = Some(estimate);
        Ok(s.view().items.swap_remove(index))
    }

    pub fn check_complete(
        &self,
        id: &str,
        user_id: &str,
    ) -> Result<ConcordanceReport, ReviewError> {
        let s = self.open_session(id, user_id)?;
        let missing = s.items.len() - s.answered();
        if missing > 0 {
            return Err(ReviewError::Unanswered(missing));
        }
        Ok(concordance(&s.items, s.threshold).expect("all answered, non-empty"))
    }

    pub fn complete(&mut self, id: &str, user_id: &str) -> Result<ReviewSessionView, ReviewError> {
        let report = self.check_complete(id, user_id)?;
        let s = self.sessions.get_mut(id).expect("checked");
        s.state = SessionState::Completed;
        s.summary = Some(report);
        Ok(s.view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(n: usize) -> Vec<PoolCase> {
        (0..n)
            .map(|i| PoolCase {
                inputs: BTreeMap::from([("age".to_string(), Value::Number(70.0 + i as f64))]),
                recorded_at: Some(
                    Utc.with_ymd_and_hms(2024, 1, 1 + i as u32, 8, 0, 0)
                        .unwrap(),
                ),
                outcome: i % 2 == 0,
                model_prediction: 0.3 + 0.1 * i as f64,
            })
            .collect()
    }

    fn new(n: usize, source: CaseSource) -> NewSession<'static> {
        NewSession {
            session_id: "rs-1".into(),
            user_id: "ana",
            service_id: "svc",
            endpoint: "survival_1y",
            source,
            n,
            threshold: 0.5,
            now: Utc::now(),
        }
    }

    #[test]
    fn concordance_hand_count() {
        let mk = |outcome, pred, est| ReviewItem {
            case: BTreeMap::new(),
            case_time: None,
            known_outcome: outcome,
            model_prediction: pred,
            user_estimate: Some(est),
        };
        // user right on items 0,1,2; model right on 0,3; agree only on 0
        let items = vec![
            mk(true, 0.9, true),
            mk(true, 0.1, true),
            mk(false, 0.8, false),
            mk(false, 0.2, true),
        ];
        let r = concordance(&items, 0.5).unwrap();
        assert_eq!(
            (r.user_vs_truth, r.model_vs_truth, r.user_vs_model),
            (0.75, 0.5, 0.25)
        );
    }

    #[test]
    fn insufficient_pool_reports_available() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            create_session(new(5, CaseSource::Simulated), &pool(3), &mut rng),
            Err(ReviewError::InsufficientPool {
                available: 3,
                requested: 5
            })
        );
    }

    #[test]
    fn open_session_conceals_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut reviews = Reviews::default();
        reviews.insert(
            create_session(new(4, CaseSource::Retrospective), &pool(10), &mut rng).unwrap(),
        );
        let json = serde_json::to_string(&reviews.get("rs-1").unwrap().view()).unwrap();
        assert!(!json.contains("known_outcome") && !json.contains("model_prediction"));
        let item = reviews.record_estimate("rs-1", "ana", 1, true).unwrap();
        assert!(item.model_prediction.is_some() && item.known_outcome.is_none());
        let json = serde_json::to_string(&reviews.get("rs-1").unwrap().view()).unwrap();
        assert_eq!(json.matches("model_prediction").count(), 1);
        assert!(!json.contains("known_outcome"));
        assert_eq!(
            reviews.record_estimate("rs-1", "ana", 1, false),
            Err(ReviewError::AlreadyAnswered(1))
        );
        assert_eq!(
            reviews.record_estimate("rs-1", "bo", 0, false),
            Err(ReviewError::NotOwner)
        );
        assert_eq!(
            reviews.complete("rs-1", "ana"),
            Err(ReviewError::Unanswered(3))
        );
        for k in [0, 2, 3] {
            reviews.record_estimate("rs-1", "ana", k, false).unwrap();
        }
        let done = reviews.complete("rs-1", "ana").unwrap();
        assert!(done.summary.is_some() && done.items.iter().all(|i| i.known_outcome.is_some()));
        assert_eq!(
            reviews.record_estimate("rs-1", "ana", 0, true),
            Err(ReviewError::Completed)
        );
    }

    #[test]
    fn retrospective_times_are_shifted() {
        let source = pool(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = create_session(new(10, CaseSource::Retrospective), &source, &mut rng).unwrap();
        let originals: Vec<_> = source.iter().map(|c| c.recorded_at.unwrap()).collect();
        for it in &s.items {
            let t = it.case_time.unwrap();
            assert!(!originals.contains(&t));
        }
        let shifts: std::collections::BTreeSet<i64> = s
            .items
            .iter()
            .map(|it| {
                let orig = source
                    .iter()
                    .find(|c| c.inputs == it.case)
                    .unwrap()
                    .recorded_at
                    .unwrap();
                (it.case_time.unwrap() - orig).num_minutes()
            })
            .collect();
        assert_eq!(shifts.len(), 1, "one offset per session");
    }
}

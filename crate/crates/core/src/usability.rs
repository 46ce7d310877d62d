//! SUS and UEQ-S questionnaires: scoring, prompt scheduling and aggregation.

use std::sync::OnceLock;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::Window;
use crate::num::Scalar;

pub const SUS_ITEMS: usize = 10;
pub const UEQS_ITEMS: usize = 8;
pub const DEFAULT_CADENCE_DAYS: i64 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Instrument {
    #[serde(rename = "SUS")]
    Sus,
    #[serde(rename = "UEQ_S")]
    UeqS,
}

impl Instrument {
    pub fn item_count(self) -> usize {
        match self {
            Instrument::Sus => SUS_ITEMS,
            Instrument::UeqS => UEQS_ITEMS,
        }
    }

    pub fn scale(self) -> (u8, u8) {
        match self {
            Instrument::Sus => (1, 5),
            Instrument::UeqS => (1, 7),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Instrument::Sus => Instrument::UeqS,
            Instrument::UeqS => Instrument::Sus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UsabilityError {
    #[error("{instrument:?} expects {expected} answers, got {got}")]
    Count {
        instrument: Instrument,
        expected: usize,
        got: usize,
    },
    #[error("item {item} answer {answer} outside {low}..={high}")]
    Range {
        item: usize,
        answer: u8,
        low: u8,
        high: u8,
    },
    #[error("prompt token is unknown, expired or already used")]
    BadPrompt,
}

fn check(
    instrument: Instrument,
    answers: &[Option<u8>],
    exact: bool,
) -> Result<(), UsabilityError> {
    let expected = instrument.item_count();
    if answers.len() > expected || (exact && answers.len() != expected) {
        return Err(UsabilityError::Count {
            instrument,
            expected,
            got: answers.len(),
        });
    }
    let (low, high) = instrument.scale();
    for (i, a) in answers.iter().enumerate() {
        if let Some(a) = *a {
            if !(low..=high).contains(&a) {
                return Err(UsabilityError::Range {
                    item: i + 1,
                    answer: a,
                    low,
                    high,
                });
            }
        }
    }
    Ok(())
}

fn complete(answers: &[u8]) -> Vec<Option<u8>> {
    answers.iter().copied().map(Some).collect()
}

/// Odd items score `a - 1`, even items `5 - a`; the sum is scaled by 2.5.
pub fn score_sus<T: Scalar>(answers: &[u8]) -> Result<T, UsabilityError> {
    check(Instrument::Sus, &complete(answers), true)?;
    let raw: usize = answers
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if i % 2 == 0 {
                a as usize - 1
            } else {
                5 - a as usize
            }
        })
        .sum();
    Ok(T::of_usize(raw) * T::lit(2.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeqsScore<T = f64> {
    pub pragmatic: T,
    pub hedonic: T,
    pub overall: T,
}

/// Answers map to `a - 4`; items 1-4 are pragmatic, 5-8 hedonic.
pub fn score_ueqs<T: Scalar>(answers: &[u8]) -> Result<UeqsScore<T>, UsabilityError> {
    check(Instrument::UeqS, &complete(answers), true)?;
    let centered: Vec<T> = answers.iter().map(|&a| T::lit(a as f64 - 4.0)).collect();
    let mean = |xs: &[T]| crate::num::mean(xs).expect("non-empty");
    Ok(UeqsScore {
        pragmatic: mean(&centered[..4]),
        hedonic: mean(&centered[4..]),
        overall: mean(&centered),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentTexts {
    pub locale: String,
    #[serde(rename = "SUS")]
    pub sus: SusTexts,
    #[serde(rename = "UEQ_S")]
    pub ueqs: UeqsTexts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusTexts {
    pub scale: [u8; 2],
    pub anchors: [String; 2],
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeqsTexts {
    pub scale: [u8; 2],
    pub items: Vec<[String; 2]>,
}

pub fn shipped_texts() -> &'static InstrumentTexts {
    static TEXTS: OnceLock<InstrumentTexts> = OnceLock::new();
    TEXTS.get_or_init(|| {
        serde_json::from_str(include_str!("../fixtures/instruments.json"))
            .expect("shipped instrument texts parse")
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub token: String,
    pub user_id: String,
    pub service_id: String,
    pub instrument: Instrument,
    #[serde(with = "crate::timefmt::millis")]
    pub issued_at: DateTime<Utc>,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsabilityResponse {
    pub response_id: String,
    pub user_id: String,
    pub service_id: String,
    pub instrument: Instrument,
    /// One slot per item; `None` marks an unanswered item.
    pub item_answers: Vec<Option<u8>>,
    #[serde(with = "crate::timefmt::millis")]
    pub answered_at: DateTime<Utc>,
}

impl UsabilityResponse {
    pub fn is_complete(&self) -> bool {
        self.item_answers.len() == self.instrument.item_count()
            && self.item_answers.iter().all(Option::is_some)
    }

    fn answers(&self) -> Option<Vec<u8>> {
        self.is_complete()
            .then(|| self.item_answers.iter().flatten().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreValue {
    Sus(f64),
    UeqS(UeqsScore),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsabilityScore {
    pub score_id: String,
    pub service_id: String,
    pub instrument: Instrument,
    pub value: ScoreValue,
    pub n: usize,
    /// Stored responses in the window that were left incomplete.
    pub excluded_partial: usize,
    pub window: Window,
    #[serde(with = "crate::timefmt::millis")]
    pub computed_at: DateTime<Utc>,
}

/// Mean score over the complete responses of one instrument; `None` when
/// there are none.
pub fn aggregate(
    score_id: String,
    service_id: &str,
    instrument: Instrument,
    window: &Window,
    responses: &[&UsabilityResponse],
    computed_at: DateTime<Utc>,
) -> Option<UsabilityScore> {
    let mut in_window: Vec<&&UsabilityResponse> = responses
        .iter()
        .filter(|r| {
            r.service_id == service_id
                && r.instrument == instrument
                && window.contains(r.answered_at)
        })
        .collect();
    in_window.sort_by(|a, b| a.response_id.cmp(&b.response_id));
    let full: Vec<Vec<u8>> = in_window.iter().filter_map(|r| r.answers()).collect();
    if full.is_empty() {
        return None;
    }
    let excluded_partial = in_window.len() - full.len();
    let value = match instrument {
        Instrument::Sus => {
            let s: Vec<f64> = full
                .iter()
                .map(|a| score_sus(a).expect("validated on submit"))
                .collect();
            ScoreValue::Sus(crate::num::mean(&s).expect("non-empty"))
        }
        Instrument::UeqS => {
            let s: Vec<UeqsScore> = full
                .iter()
                .map(|a| score_ueqs(a).expect("validated on submit"))
                .collect();
            let m = |f: fn(&UeqsScore) -> f64| {
                crate::num::mean(&s.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
            };
            ScoreValue::UeqS(UeqsScore {
                pragmatic: m(|u| u.pragmatic),
                hedonic: m(|u| u.hedonic),
                overall: m(|u| u.overall),
            })
        }
    };
    Some(UsabilityScore {
        score_id,
        service_id: service_id.to_string(),
        instrument,
        value,
        n: full.len(),
        excluded_partial,
        window: window.clone(),
        computed_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Usability {
    #[serde(with = "days")]
    cadence: TimeDelta,
    prompts: Vec<Prompt>,
    responses: Vec<UsabilityResponse>,
    scores: Vec<UsabilityScore>,
}

mod days {
    use chrono::TimeDelta;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &TimeDelta, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(d.num_days())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TimeDelta, D::Error> {
        Ok(TimeDelta::days(i64::deserialize(d)?))
    }
}

impl Default for Usability {
    fn default() -> Self {
        Self::new(TimeDelta::days(DEFAULT_CADENCE_DAYS))
    }
}

pub struct NewResponse {
    pub prompt_token: Option<String>,
    pub instrument: Instrument,
    pub item_answers: Vec<Option<u8>>,
}

impl Usability {
    pub fn new(cadence: TimeDelta) -> Self {
        Self {
            cadence,
            prompts: Vec::new(),
            responses: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn open_prompts(&self, user_id: &str, service_id: &str) -> impl Iterator<Item = &Prompt> {
        let (u, s) = (user_id.to_string(), service_id.to_string());
        self.prompts
            .iter()
            .filter(move |p| p.open && p.user_id == u && p.service_id == s)
    }

    /// Issue a prompt unless one was issued within the cadence window. Older
    /// open prompts lapse when a new one is issued. Instruments alternate,
    /// starting with SUS.
    pub fn schedule_prompt(
        &mut self,
        token: String,
        user_id: &str,
        service_id: &str,
        now: DateTime<Utc>,
    ) -> Option<Prompt> {
        let last = self
            .prompts
            .iter()
            .filter(|p| p.user_id == user_id && p.service_id == service_id)
            .max_by_key(|p| p.issued_at);
        if let Some(last) = last {
            if now - last.issued_at < self.cadence {
                return None;
            }
        }
        let instrument = last.map_or(Instrument::Sus, |p| p.instrument.other());
        for p in self
            .prompts
            .iter_mut()
            .filter(|p| p.user_id == user_id && p.service_id == service_id)
        {
            p.open = false;
        }
        let prompt = Prompt {
            token,
            user_id: user_id.to_string(),
            service_id: service_id.to_string(),
            instrument,
            issued_at: now,
            open: true,
        };
        self.prompts.push(prompt.clone());
        Some(prompt)
    }

    pub fn submit(
        &mut self,
        response_id: String,
        user_id: &str,
        service_id: &str,
        new: NewResponse,
        now: DateTime<Utc>,
    ) -> Result<UsabilityResponse, UsabilityError> {
        check(new.instrument, &new.item_answers, false)?;
        if let Some(token) = &new.prompt_token {
            let p = self
                .prompts
                .iter_mut()
                .find(|p| {
                    p.open
                        && &p.token == token
                        && p.user_id == user_id
                        && p.service_id == service_id
                        && p.instrument == new.instrument
                })
                .ok_or(UsabilityError::BadPrompt)?;
            p.open = false;
        }
        let mut answers = new.item_answers;
        answers.resize(new.instrument.item_count(), None);
        let r = UsabilityResponse {
            response_id,
            user_id: user_id.to_string(),
            service_id: service_id.to_string(),
            instrument: new.instrument,
            item_answers: answers,
            answered_at: now,
        };
        self.responses.push(r.clone());
        Ok(r)
    }

    pub fn responses(&self, service_id: &str) -> Vec<&UsabilityResponse> {
        self.responses
            .iter()
            .filter(|r| r.service_id == service_id)
            .collect()
    }

    pub fn push_score(&mut self, s: UsabilityScore) {
        self.scores.push(s);
    }

    pub fn scores(&self, service_id: &str) -> Vec<&UsabilityScore> {
        self.scores
            .iter()
            .filter(|s| s.service_id == service_id)
            .collect()
    }
}

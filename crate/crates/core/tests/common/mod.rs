#![allow(dead_code)]

pub mod scenarios;

use std::collections::BTreeMap;
use std::sync::Arc;

use aegis_core::clock::ManualClock;
use aegis_core::compliance::{Mode, NewCertification, Scheme};
use aegis_core::gateway::{stub_passport, PredictionJob};
use aegis_core::iam::{HashCost, NewAccount, Role};
use aegis_core::platform::{ConfirmRequest, NewJob, StubFactory};
use aegis_core::{Caller, Platform, PlatformConfig, PlatformError};
use chrono::{NaiveDate, TimeZone, Utc};
use serde_json::{json, Value as Json};

pub const SERVICE: &str = "palliative-1y";
pub const ENDPOINT: &str = "stub:palliative";
pub const SECRET: &str = "correct horse battery";

pub const USERS: [(&str, &str, Role); 5] = [
    ("admin", "hospital-a", Role::Admin),
    ("clin", "hospital-a", Role::Clinician),
    ("clin_b", "hospital-b", Role::Clinician),
    ("researcher", "university", Role::Researcher),
    ("auditor", "hospital-a", Role::Auditor),
];

pub fn test_config() -> PlatformConfig {
    let mut config = PlatformConfig::default();
    config.iam.hash_cost = HashCost::minimal();
    config
}

pub struct World {
    pub platform: Platform,
    pub clock: ManualClock,
    tokens: BTreeMap<String, String>,
}

impl World {
    /// Users created and logged in, stub service registered, nothing certified.
    pub fn new() -> Self {
        let clock = ManualClock::new(Utc.with_ymd_and_hms(2025, 6, 2, 9, 0, 0).unwrap());
        let platform = Platform::in_memory(
            test_config(),
            Arc::new(clock.clone()),
            Arc::new(StubFactory),
        );
        Self::populate(platform, clock)
    }

    pub fn populate(platform: Platform, clock: ManualClock) -> Self {
        for (user_id, org, role) in USERS {
            platform
                .create_user(
                    Caller::System,
                    NewAccount {
                        user_id: user_id.into(),
                        display_name: user_id.into(),
                        organisation: org.into(),
                        role,
                        secret: SECRET.into(),
                    },
                )
                .expect("create user");
        }
        let mut w = Self::attach(platform, clock);
        w.relogin();
        w.platform
            .register_service(w.caller("admin"), stub_passport(), ENDPOINT)
            .expect("register stub service");
        w
    }

    /// Wrap an already populated platform. Call [`World::relogin`] before use.
    pub fn attach(platform: Platform, clock: ManualClock) -> Self {
        Self {
            platform,
            clock,
            tokens: BTreeMap::new(),
        }
    }

    pub fn relogin(&mut self) {
        for (user_id, _, _) in USERS {
            let s = self.platform.login(user_id, SECRET).expect("login");
            self.tokens.insert(user_id.into(), s.token);
        }
    }

    pub fn caller(&self, user: &str) -> Caller<'_> {
        Caller::Token(&self.tokens[user])
    }

    pub fn certify(&self) -> Result<(), PlatformError> {
        self.platform
            .add_certification(self.caller("admin"), SERVICE, ce_certificate())
            .map(|_| ())
    }

    pub fn draft(
        &self,
        user: &str,
        mode: Mode,
        case: Json,
    ) -> Result<PredictionJob, PlatformError> {
        self.platform.create_job(
            self.caller(user),
            NewJob {
                service_id: SERVICE.into(),
                mode,
                format: aegis_core::interop::CaseFormat::Flat,
                case,
                care_context: None,
            },
        )
    }

    /// Draft, confirm and execute one clinical job. Needs a certified service.
    pub fn run_clinical(&self, user: &str, case: Json) -> Result<PredictionJob, PlatformError> {
        let job = self.draft(user, Mode::Clinical, case)?;
        self.platform
            .confirm_job(self.caller(user), &job.job_id, ConfirmRequest::default())?;
        self.platform.execute_job(self.caller(user), &job.job_id)
    }
}

pub fn ce_certificate() -> NewCertification {
    NewCertification {
        scheme: Scheme::CeMdr2017745,
        certificate_number: "CE-0001".into(),
        jurisdictions: ["ES".to_string()].into(),
        valid_from: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
        valid_to: NaiveDate::from_ymd_opt(2027, 12, 31).unwrap(),
    }
}

/// Flat case document with every required input in its declared unit.
pub fn case_doc(pseudo_id: &str) -> Json {
    json!({
        "patient_pseudo_id": pseudo_id,
        "source_system": "his-a",
        "variables": {
            "age": { "value": 84, "unit": "a" },
            "barthel": { "value": 45, "unit": "{score}" },
            "charlson": { "value": 4, "unit": "{score}" },
            "creatinine": { "value": 1.3, "unit": "mg/dL" },
            "albumin": { "value": 3.1, "unit": "g/dL" },
            "sex": "female"
        }
    })
}

/// Same document with varied inputs, for building cohorts.
pub fn varied_case(i: usize) -> Json {
    let mut doc = case_doc(&format!("p-{i:03}"));
    let v = &mut doc["variables"];
    v["age"]["value"] = json!(66 + (i * 7) % 40);
    v["barthel"]["value"] = json!((i * 13) % 101);
    v["charlson"]["value"] = json!((i * 3) % 12);
    v["albumin"]["value"] = json!(2.0 + ((i * 5) % 30) as f64 / 10.0);
    v["sex"] = json!(if i.is_multiple_of(2) {
        "female"
    } else {
        "male"
    });
    doc
}

pub fn with_variable(mut doc: Json, name: &str, value: Json) -> Json {
    doc["variables"][name] = value;
    doc
}

pub fn without_variable(mut doc: Json, name: &str) -> Json {
    doc["variables"].as_object_mut().unwrap().remove(name);
    doc
}

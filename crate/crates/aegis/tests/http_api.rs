use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use std::collections::BTreeMap;

use aegis::adapter::{HttpAdapter, HttpFactory};
use aegis::server::Background;
use aegis_core::audit::{verify_bytes, ChainStatus};
use aegis_core::clock::SystemClock;
use aegis_core::gateway::{stub_passport, AdapterError, AdapterRequest, ModelAdapter, StubAdapter};
use aegis_core::iam::{HashCost, NewAccount, Role};
use aegis_core::interop::Value as CoreValue;
use aegis_core::{Caller, Platform, PlatformConfig};
use axum::routing::post;
use axum::Router;
use serde_json::{json, Value};

const SECRET: &str = "correct horse battery";

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(addr: SocketAddr) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            base: format!("http://{addr}"),
            agent,
        }
    }

    fn send(
        &self,
        method: &str,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (u16, String) {
        let url = format!("{}{path}", self.base);
        let auth = token.map(|t| format!("Bearer {t}"));
        let mut resp = match method {
            "GET" => {
                let mut r = self.agent.get(&url);
                if let Some(a) = &auth {
                    r = r.header("Authorization", a);
                }
                r.call()
            }
            _ => {
                let mut r = match method {
                    "POST" => self.agent.post(&url),
                    "PUT" => self.agent.put(&url),
                    m => panic!("method {m}"),
                };
                if let Some(a) = &auth {
                    r = r.header("Authorization", a);
                }
                match body {
                    Some(b) => r.send_json(&b),
                    None => r.send_empty(),
                }
            }
        }
        .expect("transport");
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    fn call(
        &self,
        method: &str,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (u16, Value) {
        let (status, text) = self.send(method, path, token, body);
        let v = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        (status, v)
    }

    fn get(&self, path: &str, token: &str) -> (u16, Value) {
        self.call("GET", path, Some(token), None)
    }

    fn post(&self, path: &str, token: &str, body: Value) -> (u16, Value) {
        self.call("POST", path, Some(token), Some(body))
    }

    fn login(&self, user: &str) -> String {
        let (s, v) = self.call(
            "POST",
            "/auth/login",
            None,
            Some(json!({ "user_id": user, "secret": SECRET })),
        );
        assert_eq!(s, 201, "{v}");
        v["token"].as_str().unwrap().to_string()
    }
}

fn config() -> PlatformConfig {
    let mut c = PlatformConfig::default();
    c.iam.hash_cost = HashCost::minimal();
    c
}

fn platform(config: PlatformConfig) -> Arc<Platform> {
    let p = Platform::in_memory(config, Arc::new(SystemClock), Arc::new(HttpFactory));
    p.create_user(
        Caller::System,
        NewAccount {
            user_id: "admin".into(),
            display_name: "Admin".into(),
            organisation: "hospital-a".into(),
            role: Role::Admin,
            secret: SECRET.into(),
        },
    )
    .unwrap();
    Arc::new(p)
}

fn case(pseudo: &str) -> Value {
    json!({
        "patient_pseudo_id": pseudo,
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

fn add_user(c: &Client, admin: &str, id: &str, org: &str, role: &str) -> String {
    let (s, v) = c.post(
        "/users",
        admin,
        json!({ "user_id": id, "display_name": id, "organisation": org, "role": role, "secret": SECRET }),
    );
    assert_eq!(s, 201, "{v}");
    assert!(v.get("secret").is_none());
    c.login(id)
}

fn certify(c: &Client, admin: &str, service: &str) {
    let (s, v) = c.post(
        &format!("/services/{service}/certifications"),
        admin,
        json!({
            "scheme": "CE_MDR_2017_745",
            "certificate_number": "CE-0001",
            "jurisdictions": ["ES"],
            "valid_from": "2024-01-01",
            "valid_to": "2027-12-31"
        }),
    );
    assert_eq!(s, 201, "{v}");
}

#[test]
fn clinical_round_trip_through_the_http_adapter() {
    let model = Background::spawn(aegis::stub_server::router(), local()).unwrap();
    let server = Background::spawn(aegis::api::router(platform(config())), local()).unwrap();
    let c = Client::new(server.addr());

    assert_eq!(c.call("GET", "/health", None, None).0, 200);
    let (s, v) = c.call("GET", "/services", None, None);
    assert_eq!(s, 401);
    assert_eq!(v["kind"], "unauthenticated");

    let admin = c.login("admin");
    let clin = add_user(&c, &admin, "clin", "hospital-a", "clinician");
    let auditor = add_user(&c, &admin, "auditor", "hospital-a", "auditor");

    let (s, v) = c.post(
        "/users",
        &clin,
        json!({ "user_id": "x", "display_name": "x", "organisation": "o", "role": "admin", "secret": SECRET }),
    );
    assert_eq!((s, v["kind"].as_str()), (403, Some("forbidden")));

    let endpoint = format!("http://{}", model.addr());
    let (s, v) = c.post(
        "/services",
        &admin,
        json!({ "passport": stub_passport(), "endpoint": endpoint }),
    );
    assert_eq!(s, 201, "{v}");
    let id = v["service_id"].as_str().unwrap().to_string();
    assert_eq!(v["version"], 1);

    let (s, v) = c.get("/services", &clin);
    assert_eq!(s, 200);
    assert_eq!(v[0]["service_id"], id.as_str());
    assert_eq!(v[0]["endpoint"], endpoint.as_str());
    assert_eq!(
        c.get(&format!("/services/{id}/passport?version=1"), &clin)
            .0,
        200
    );
    assert_eq!(
        c.get(&format!("/services/{id}/passport?version=99"), &clin)
            .0,
        404
    );
    assert_eq!(c.get("/services/nope/passport", &clin).0, 404);

    let (s, v) = c.get(
        &format!("/services/{id}/regulation?jurisdiction=ES&mode=clinical"),
        &clin,
    );
    assert_eq!(s, 200, "{v}");
    let (s, _) = c.get(&format!("/services/{id}/regulation?mode=sideways"), &clin);
    assert_eq!(s, 422);

    // Uncertified: clinical drafts are refused at confirmation.
    let (s, draft) = c.post(
        "/jobs",
        &clin,
        json!({ "service_id": id, "mode": "clinical", "case": case("p-0") }),
    );
    assert_eq!(s, 201, "{draft}");
    let (s, v) = c.call(
        "POST",
        &format!("/jobs/{}/confirm", draft["job_id"].as_str().unwrap()),
        Some(&clin),
        None,
    );
    assert_eq!(s, 422, "{v}");
    assert_eq!(v["kind"], "refused");

    certify(&c, &admin, &id);
    let (s, v) = c.get(&format!("/services/{id}/disclaimer"), &clin);
    assert_eq!(s, 200);
    assert_eq!(v["banner_required"], false);

    let (s, dry) = c.post(
        "/ingest",
        &clin,
        json!({ "service_id": id, "case": case("p-1") }),
    );
    assert_eq!(s, 200, "{dry}");
    assert_eq!(dry["result"], "dry_run");
    assert_eq!(dry["quality"]["verdict"], "pass");

    let (s, job) = c.post(
        "/jobs",
        &clin,
        json!({ "service_id": id, "mode": "clinical", "case": case("p-1") }),
    );
    assert_eq!(s, 201, "{job}");
    let job_id = job["job_id"].as_str().unwrap().to_string();
    assert_eq!(job["state"], "draft");

    let (s, v) = c.call(
        "POST",
        &format!("/jobs/{job_id}/execute"),
        Some(&clin),
        None,
    );
    assert_eq!((s, v["kind"].as_str()), (409, Some("state")));

    let (s, v) = c.call(
        "POST",
        &format!("/jobs/{job_id}/confirm"),
        Some(&clin),
        None,
    );
    assert_eq!(s, 200, "{v}");
    let (s, done) = c.call(
        "POST",
        &format!("/jobs/{job_id}/execute"),
        Some(&clin),
        None,
    );
    assert_eq!(s, 200, "{done}");
    assert_eq!(done["state"], "executed");
    let survival = done["outputs"]["survival_1y"].as_f64().unwrap();
    assert!((survival - 0.50577).abs() < 1e-4, "{survival}");

    let (s, attr) = c.get(&format!("/jobs/{job_id}/attribution"), &clin);
    assert_eq!(s, 200);
    assert_eq!(attr, done["attributions"]);
    let a = &attr[0];
    let sum: f64 = a["contributions"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .sum();
    let gap = a["prediction"].as_f64().unwrap() - a["baseline_prediction"].as_f64().unwrap();
    assert!((sum - gap).abs() < 1e-9, "{sum} vs {gap}");

    let (s, v) = c.call(
        "POST",
        &format!("/jobs/{job_id}/execute"),
        Some(&clin),
        None,
    );
    assert_eq!(s, 409, "{v}");

    let (s, list) = c.get("/jobs?user=clin", &clin);
    assert_eq!(s, 200);
    assert_eq!(list.as_array().unwrap().len(), 2);

    let outcome = json!({ "survival_1y": true, "qol_1y": false });
    let (s, v) = c.post(
        &format!("/jobs/{job_id}/ground-truth"),
        &clin,
        outcome.clone(),
    );
    assert_eq!(s, 201, "{v}");
    assert_eq!(
        c.post(&format!("/jobs/{job_id}/ground-truth"), &clin, outcome)
            .0,
        409
    );

    let (s, v) = c.post(
        &format!("/services/{id}/performance/compute?window=2020-W01"),
        &admin,
        json!({}),
    );
    assert_eq!(s, 200, "{v}");
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(
        c.post(
            &format!("/services/{id}/performance/compute"),
            &admin,
            json!({})
        )
        .0,
        422
    );
    let (s, v) = c.get(&format!("/services/{id}/performance"), &clin);
    assert_eq!(s, 200);
    assert_eq!(v["snapshots"].as_array().unwrap().len(), 2);

    let (s, v) = c.get(&format!("/services/{id}/coverage"), &clin);
    assert_eq!(s, 200, "{v}");

    // Audit: clinicians may not read it; auditors may, and the export verifies.
    assert_eq!(c.get("/audit", &clin).0, 403);
    let (s, page) = c.get("/audit?user=clin&action=job_executed", &auditor);
    assert_eq!(s, 200, "{page}");
    assert_eq!(page["total"], 1);
    assert_eq!(page["records"][0]["user_id"], "clin");
    let (s, denied) = c.get("/audit?action=access_denied", &auditor);
    assert_eq!(s, 200);
    let users: Vec<&str> = denied["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["user_id"].as_str().unwrap())
        .collect();
    assert!(
        users.contains(&"anonymous") && users.contains(&"clin"),
        "{users:?}"
    );
    let (s, text) = c.send("GET", "/audit/export", Some(&auditor), None);
    assert_eq!(s, 200);
    match verify_bytes(text.as_bytes(), None) {
        ChainStatus::Ok { records } => assert!(records > 10),
        other => panic!("{other:?}"),
    }
    let (s, text) = c.send("GET", "/audit/export?range=2..4", Some(&auditor), None);
    assert_eq!(s, 200);
    assert_eq!(text.lines().count(), 3);
    let (s, v) = c.get("/audit/verify", &auditor);
    assert_eq!(s, 200);
    assert_eq!(v["status"], "ok", "{v}");
    assert_eq!(c.get("/audit/export?range=9..3", &auditor).0, 422);

    let (s, v) = c.call("POST", "/auth/logout", Some(&clin), None);
    assert_eq!(s, 204, "{v}");
    assert_eq!(c.get("/services", &clin).0, 401);
}

#[test]
fn http_adapter_matches_in_process_stub() {
    let model = Background::spawn(aegis::stub_server::router(), local()).unwrap();
    let http = HttpAdapter::new(&format!("http://{}/", model.addr()), Duration::from_secs(5));
    assert!(http.url().ends_with("/predict") && !http.url().contains("//predict"));
    let stub = StubAdapter::default();
    for i in 0..20 {
        let f = i as f64;
        let inputs: BTreeMap<String, CoreValue> = [
            ("age", CoreValue::Number(60.0 + f * 1.7)),
            ("barthel", CoreValue::Number((f * 13.0) % 101.0)),
            ("charlson", CoreValue::Number(f % 12.0)),
            ("creatinine", CoreValue::Number(0.6 + f * 0.11)),
            ("albumin", CoreValue::Number(2.0 + f * 0.09)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let req = AdapterRequest {
            inputs,
            passport_version: 1,
        };
        assert_eq!(http.predict(&req).unwrap(), stub.predict(&req).unwrap());
    }
    let bad = AdapterRequest {
        inputs: BTreeMap::new(),
        passport_version: 1,
    };
    assert!(matches!(http.predict(&bad), Err(AdapterError::Protocol(_))));
}

#[test]
fn request_errors_use_the_platform_error_shape() {
    let server = Background::spawn(aegis::api::router(platform(config())), local()).unwrap();
    let c = Client::new(server.addr());
    let admin = c.login("admin");

    let (s, v) = c.call(
        "POST",
        "/auth/login",
        None,
        Some(json!({ "user_id": "admin", "secret": "wrong" })),
    );
    assert_eq!((s, v["kind"].as_str()), (401, Some("unauthenticated")));

    let (s, v) = c.post("/services", &admin, json!({ "passport": 3 }));
    assert_eq!(s, 422);
    assert_eq!(v["kind"], "invalid");
    assert!(v["message"].as_str().unwrap().starts_with("request body"));

    let (s, v) = c.post(
        "/services",
        &admin,
        json!({ "passport": stub_passport(), "endpoint": "ftp://x" }),
    );
    assert!(s == 422 || s == 502, "{s} {v}");

    let (s, v) = c.get("/no/such/route", &admin);
    assert_eq!((s, v["kind"].as_str()), (404, Some("not_found")));
    // Role check comes before the lookup.
    assert_eq!(c.get("/jobs/missing", &admin).0, 403);
    let clin = add_user(&c, &admin, "clin", "hospital-a", "clinician");
    assert_eq!(c.get("/jobs/missing", &clin).0, 404);
}

#[test]
fn unreachable_and_slow_models_surface_as_upstream_errors() {
    let slow = Router::new().route(
        "/predict",
        post(|| async {
            tokio::time::sleep(Duration::from_secs(3)).await;
            "late"
        }),
    );
    let slow = Background::spawn(slow, local()).unwrap();
    // A port that nothing listens on.
    let dead = std::net::TcpListener::bind(local())
        .unwrap()
        .local_addr()
        .unwrap();

    let mut cfg = config();
    cfg.adapter_timeout = Duration::from_millis(300);
    let server = Background::spawn(aegis::api::router(platform(cfg)), local()).unwrap();
    let c = Client::new(server.addr());
    let admin = c.login("admin");
    let researcher = add_user(&c, &admin, "res", "university", "researcher");

    for (name, addr) in [("slow", slow.addr()), ("dead", dead)] {
        let mut passport = stub_passport();
        passport.service_id = format!("{name}-svc");
        let (s, v) = c.post(
            "/services",
            &admin,
            json!({ "passport": passport, "endpoint": format!("http://{addr}") }),
        );
        assert_eq!(s, 201, "{v}");
        let (s, job) = c.post(
            "/jobs",
            &researcher,
            json!({ "service_id": passport.service_id, "mode": "academic", "case": case("p-1") }),
        );
        assert_eq!(s, 201, "{job}");
        let job_id = job["job_id"].as_str().unwrap();
        let (s, v) = c.post(
            &format!("/services/{}/disclaimer-ack", passport.service_id),
            &researcher,
            json!({}),
        );
        assert_eq!(s, 201, "{v}");
        assert_eq!(
            c.call(
                "POST",
                &format!("/jobs/{job_id}/confirm"),
                Some(&researcher),
                None
            )
            .0,
            200
        );
        let started = std::time::Instant::now();
        let (s, v) = c.call(
            "POST",
            &format!("/jobs/{job_id}/execute"),
            Some(&researcher),
            None,
        );
        assert_eq!(
            (s, v["kind"].as_str()),
            (502, Some("upstream")),
            "{name}: {v}"
        );
        // academic mode retries once; each attempt is bounded by the timeout
        assert!(
            started.elapsed() < Duration::from_secs(3),
            "{name}: {:?}",
            started.elapsed()
        );
        let (_, after) = c.get(&format!("/jobs/{job_id}"), &researcher);
        assert_eq!(after["state"], "confirmed", "{name}");
    }
    drop(slow);
}

#[test]
fn review_and_usability_endpoints() {
    let server = Background::spawn(aegis::api::router(platform(config())), local()).unwrap();
    let c = Client::new(server.addr());
    let admin = c.login("admin");
    let clin = add_user(&c, &admin, "clin", "hospital-a", "clinician");
    let (s, _) = c.post(
        "/services",
        &admin,
        json!({ "passport": stub_passport(), "endpoint": "stub:palliative" }),
    );
    assert_eq!(s, 201);
    let id = stub_passport().service_id;
    certify(&c, &admin, &id);

    let (s, v) = c.get(&format!("/usability/prompt?service={id}"), &clin);
    assert_eq!((s, &v), (200, &Value::Null));

    for i in 0..5 {
        let (_, job) = c.post(
            "/jobs",
            &clin,
            json!({ "service_id": id, "mode": "clinical", "case": case(&format!("p-{i}")) }),
        );
        let job_id = job["job_id"].as_str().unwrap();
        assert_eq!(
            c.call(
                "POST",
                &format!("/jobs/{job_id}/confirm"),
                Some(&clin),
                None
            )
            .0,
            200
        );
        assert_eq!(
            c.call(
                "POST",
                &format!("/jobs/{job_id}/execute"),
                Some(&clin),
                None
            )
            .0,
            200
        );
        let (s, _) = c.post(
            &format!("/jobs/{job_id}/ground-truth"),
            &clin,
            json!({ "survival_1y": i % 2 == 0, "qol_1y": true }),
        );
        assert_eq!(s, 201);
    }

    let (s, prompt) = c.get(&format!("/usability/prompt?service={id}"), &clin);
    assert_eq!(s, 200, "{prompt}");
    let instrument = prompt["prompt"]["instrument"].as_str().unwrap().to_string();
    let items = if instrument == "SUS" { 10 } else { 8 };
    let answers: Vec<u8> = (0..items)
        .map(|i| {
            if instrument == "SUS" {
                1 + (i % 5) as u8
            } else {
                1 + (i % 7) as u8
            }
        })
        .collect();
    let (s, v) = c.post(
        "/usability/responses",
        &clin,
        json!({
            "service_id": id,
            "prompt_token": prompt["prompt"]["token"],
            "instrument": instrument,
            "item_answers": answers,
        }),
    );
    assert_eq!(s, 201, "{v}");
    let (s, v) = c.post(
        &format!("/services/{id}/usability/aggregate?window=2000-01-01..2100-01-01"),
        &admin,
        json!({}),
    );
    assert_eq!(s, 200, "{v}");
    let (s, scores) = c.get(&format!("/services/{id}/usability"), &clin);
    assert_eq!(s, 200);
    assert_eq!(scores, v);

    let (s, v) = c.post(
        "/review/sessions",
        &clin,
        json!({ "service_id": id, "source": "retrospective", "n": 9 }),
    );
    assert_eq!(s, 422, "{v}");
    assert_eq!(v["detail"]["available"], 5);
    let (s, session) = c.post(
        "/review/sessions",
        &clin,
        json!({ "service_id": id, "endpoint": "survival_1y", "source": "retrospective", "n": 3 }),
    );
    assert_eq!(s, 201, "{session}");
    let sid = session["session_id"].as_str().unwrap();
    assert!(session["items"]
        .as_array()
        .unwrap()
        .iter()
        .all(|i| i["known_outcome"].is_null()));
    assert_eq!(
        c.call(
            "POST",
            &format!("/review/sessions/{sid}/complete"),
            Some(&clin),
            None
        )
        .0,
        409
    );
    for k in 0..3 {
        let (s, item) = c.post(
            &format!("/review/sessions/{sid}/items/{k}/estimate"),
            &clin,
            json!({ "estimate": k == 0 }),
        );
        assert_eq!(s, 200, "{item}");
        assert!(item["model_prediction"].is_number());
        assert!(item["known_outcome"].is_null());
    }
    let (s, done) = c.call(
        "POST",
        &format!("/review/sessions/{sid}/complete"),
        Some(&clin),
        None,
    );
    assert_eq!(s, 200, "{done}");
    assert_eq!(done["summary"]["n"], 3);
    assert!(done["items"]
        .as_array()
        .unwrap()
        .iter()
        .all(|i| !i["known_outcome"].is_null()));
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use aegis_core::audit::{verify_bytes, AuditAction, AuditEvent, AuditLog, ChainStatus};
use aegis_core::clock::ManualClock;
use aegis_core::compliance::{coverage_report, Mode, Requirement};
use aegis_core::gateway::{JobState, PredictionJob};
use aegis_core::interop::Value;
use aegis_core::monitor::OutcomeInput;
use aegis_core::platform::{AckRequest, ConfirmRequest, ErrorKind};
use aegis_core::stats::{auc, brier, psi};
use aegis_core::usability::{score_sus, score_ueqs};
use aegis_core::xai::{explain, sampled_shapley, ExplainConfig, Method};
use aegis_core::Caller;
use chrono::{TimeZone, Utc};
use common::{scenarios, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Check = Result<String, String>;

fn table1() -> Check {
    let start = Instant::now();
    let mut failures = Vec::new();
    for (name, row) in scenarios::ROWS {
        if let Err(e) = row() {
            failures.push(format!("row {name}: {e}"));
        }
    }
    let elapsed = start.elapsed();
    let passed = scenarios::ROWS.len() - failures.len();
    if !failures.is_empty() {
        return Err(format!("{passed}/8 rows; {}", failures.join(" | ")));
    }
    if elapsed >= Duration::from_secs(60) {
        return Err(format!("8/8 rows but took {elapsed:.1?}"));
    }
    Ok(format!("8/8 rows in {elapsed:.2?}"))
}

fn coverage_golden() -> Check {
    let golden: BTreeMap<String, Vec<String>> =
        serde_json::from_str(include_str!("golden/risk_matrix.json")).map_err(|e| e.to_string())?;
    let all: BTreeSet<Requirement> = Requirement::ALL.into_iter().collect();
    let report = coverage_report("golden", &all);
    let got: BTreeMap<String, Vec<String>> = report
        .risks
        .iter()
        .map(|r| {
            let names = r
                .mitigating
                .iter()
                .map(|q| {
                    serde_json::to_value(q)
                        .unwrap()
                        .as_str()
                        .unwrap()
                        .to_string()
                })
                .collect();
            (r.risk_id.to_string(), names)
        })
        .collect();
    if got != golden {
        return Err(format!("coverage matrix drifted: {got:?}"));
    }
    if !report.risks.iter().all(|r| r.covered && r.gaps.is_empty()) {
        return Err("fully enabled service reports gaps".into());
    }
    Ok(format!("{} risks match the transcription", golden.len()))
}

/// Random smooth model over `d` real features with pairwise and triple interactions.
#[derive(Clone)]
struct RandomModel {
    bias: f64,
    linear: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
    triple: Option<(usize, usize, usize, f64)>,
    wave: Vec<f64>,
}

impl RandomModel {
    fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let mut pairs = Vec::new();
        for i in 0..d {
            for j in i + 1..d {
                if rng.random_bool(0.5) {
                    pairs.push((i, j, rng.random_range(-2.0..2.0)));
                }
            }
        }
        if d >= 2 && pairs.is_empty() {
            pairs.push((0, 1, rng.random_range(0.5..2.0)));
        }
        let triple = (d >= 3).then(|| (0, 1, 2, rng.random_range(-1.0..1.0)));
        Self {
            bias: rng.random_range(-1.0..1.0),
            linear: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
            pairs,
            triple,
            wave: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let mut y = self.bias;
        for (i, &xi) in x.iter().enumerate() {
            y += self.linear[i] * xi + self.wave[i] * xi.sin();
        }
        for &(i, j, w) in &self.pairs {
            y += w * x[i] * x[j];
        }
        if let Some((i, j, k, w)) = self.triple {
            y += w * x[i] * x[j] * x[k];
        }
        y
    }
}

/// Shapley values by averaging marginal contributions over every permutation.
fn permutation_oracle(f: &dyn Fn(&[f64]) -> f64, x: &[f64], z: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut phi = vec![0.0; d];
    let mut perm: Vec<usize> = (0..d).collect();
    let mut count = 0usize;
    loop {
        let mut cur = z.to_vec();
        let mut prev = f(&cur);
        for &j in &perm {
            cur[j] = x[j];
            let v = f(&cur);
            phi[j] += v - prev;
            prev = v;
        }
        count += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    phi.iter().map(|p| p / count as f64).collect()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn xai_exact() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ba9);
    let mut worst_eff = 0.0f64;
    for trial in 0..50 {
        let d = 1 + trial % 8;
        let model = RandomModel::new(&mut rng, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let names: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        let as_map = |v: &[f64]| -> BTreeMap<String, Value> {
            names
                .iter()
                .cloned()
                .zip(v.iter().map(|&a| Value::Number(a)))
                .collect()
        };
        let eval_map = |m: &BTreeMap<String, Value>| -> Result<f64, String> {
            let v: Vec<f64> = names.iter().map(|n| m[n].as_f64().unwrap()).collect();
            Ok(model.eval(&v))
        };
        let a = explain::<f64, String, _>(
            "y",
            &as_map(&x),
            &as_map(&z),
            &ExplainConfig::default(),
            eval_map,
        )
        .map_err(|e| format!("trial {trial}: {e}"))?;
        if a.method != Method::ExactShapley {
            return Err(format!("trial {trial}: d={d} not explained exactly"));
        }
        let fx = model.eval(&x);
        let fz = model.eval(&z);
        let tol = 1e-9 * fx.abs().max(1.0);
        let sum: f64 = a.contributions.values().sum();
        let eff = (sum - (fx - fz)).abs();
        worst_eff = worst_eff.max(eff / fx.abs().max(1.0));
        if eff > tol {
            return Err(format!(
                "trial {trial}: |sum phi - (f(x)-f(z))| = {eff:e} > {tol:e}"
            ));
        }
        let oracle = permutation_oracle(&|v| model.eval(v), &x, &z);
        for (i, n) in names.iter().enumerate() {
            let gap = (a.contributions[n] - oracle[i]).abs();
            if gap > tol {
                return Err(format!(
                    "trial {trial}: phi[{n}] off the permutation oracle by {gap:e}"
                ));
            }
        }
    }
    Ok(format!(
        "50/50 models, worst relative efficiency gap {worst_eff:.1e}"
    ))
}

fn xai_sampled() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut within = 0;
    for trial in 0..100u64 {
        let d = 2 + (trial % 2) as usize;
        let model = RandomModel::new(&mut rng, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let oracle = permutation_oracle(&|v| model.eval(v), &x, &z);
        let est =
            sampled_shapley::<f64, f64, (), _>(&x, &z, 2000, trial, |v| Ok(model.eval(v))).unwrap();
        let se = est
            .std_error
            .expect("sampled estimate carries standard errors");
        if (0..d).all(|i| (est.phi[i] - oracle[i]).abs() <= 3.0 * se[i]) {
            within += 1;
        }
    }
    if within >= 95 {
        Ok(format!("{within}/100 trials within 3 standard errors"))
    } else {
        Err(format!("only {within}/100 trials within 3 standard errors"))
    }
}

fn audit_tamper() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0d1);
    let clock = ManualClock::new(Utc.with_ymd_and_hms(2025, 6, 2, 9, 0, 0).unwrap());
    let mut detected = 0;
    let mut misses = Vec::new();
    for trial in 0..100 {
        let mut log = AuditLog::in_memory(Arc::new(clock.clone()));
        let n = rng.random_range(1..=200);
        for i in 0..n {
            let action = AuditAction::ALL[rng.random_range(0..AuditAction::ALL.len())];
            let mut e = AuditEvent::new(format!("user-{}", rng.random_range(0..5)), action)
                .detail(json!({ "i": i, "x": rng.random::<f64>(), "tag": "é ✓" }));
            if rng.random_bool(0.5) {
                e = e.service("svc").version(rng.random_range(1..4));
            }
            log.append(e).map_err(|e| e.to_string())?;
            clock.advance(chrono::TimeDelta::milliseconds(rng.random_range(0..5000)));
        }
        let mut bytes = log.export(None).into_bytes();
        if verify_bytes(&bytes, None) != (ChainStatus::Ok { records: n }) {
            return Err(format!("trial {trial}: untouched log does not verify"));
        }
        let pos = rng.random_range(0..bytes.len());
        let expected = 1 + bytes[..pos].iter().filter(|&&b| b == b'\n').count() as u64;
        let original = bytes[pos];
        let mut replacement = rng.random::<u8>();
        while replacement == original {
            replacement = rng.random::<u8>();
        }
        bytes[pos] = replacement;
        match verify_bytes(&bytes, None) {
            ChainStatus::Corrupt { first_bad_seq } if first_bad_seq == expected => detected += 1,
            other => misses.push(format!(
                "trial {trial}: expected seq {expected}, got {other:?}"
            )),
        }
    }
    if detected == 100 {
        Ok("100/100 corruptions located at the exact seq".into())
    } else {
        Err(format!("{detected}/100; {}", misses.join(" | ")))
    }
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins2, mut pairs) = (0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                pairs += 1;
                wins2 += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (pairs > 0).then(|| wins2 as f64 / 2.0 / pairs as f64)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xac);
    for trial in 0..50 {
        let n = rng.random_range(2..=100);
        let coarse = trial % 2 == 0;
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..8) as f64 / 8.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let (a, b) = (auc(&scores, &labels), brute_auc(&scores, &labels));
        if a != b {
            return Err(format!("trial {trial}: rank AUC {a:?} vs pair count {b:?}"));
        }
    }
    let probs = [0.9, 0.2, 0.6, 0.4];
    let labels = [true, false, false, true];
    let hand_brier = (0.1f64.powi(2) + 0.2f64.powi(2) + 0.6f64.powi(2) + 0.6f64.powi(2)) / 4.0;
    let b = brier(&probs, &labels).unwrap();
    if (b - hand_brier).abs() > 1e-12 || (b - 0.1925).abs() > 1e-12 {
        return Err(format!("Brier {b} vs hand value {hand_brier}"));
    }
    let hand_psi = (0.8f64 - 0.5) * (0.8f64 / 0.5).ln() + (0.2f64 - 0.5) * (0.2f64 / 0.5).ln();
    let p = psi(&[0.5, 0.5], &[0.8, 0.2]);
    if (p - hand_psi).abs() > 1e-12 {
        return Err(format!("PSI {p} vs hand value {hand_psi}"));
    }
    Ok(format!("AUC exact on 50 datasets; Brier {b}; PSI {p:.6}"))
}

fn instruments() -> Check {
    let sus = |a: [u8; 10]| score_sus::<f64>(&a).map_err(|e| e.to_string());
    let ueqs = |a: [u8; 8]| score_ueqs::<f64>(&a).map_err(|e| e.to_string());
    let hand_sus = |a: &[u8]| -> f64 {
        a.iter()
            .enumerate()
            .map(|(i, &v)| {
                if i % 2 == 0 {
                    v as f64 - 1.0
                } else {
                    5.0 - v as f64
                }
            })
            .sum::<f64>()
            * 2.5
    };
    let mid = sus([3; 10])?;
    let max = sus([5, 1, 5, 1, 5, 1, 5, 1, 5, 1])?;
    let min = sus([1, 5, 1, 5, 1, 5, 1, 5, 1, 5])?;
    if (mid, max, min) != (50.0, 100.0, 0.0) {
        return Err(format!("SUS vectors gave {mid}, {max}, {min}"));
    }
    let neutral = ueqs([4; 8])?;
    let top = ueqs([7; 8])?;
    let split = ueqs([7, 7, 7, 7, 1, 1, 1, 1])?;
    let tuple = |s: aegis_core::UeqsScore| (s.pragmatic, s.hedonic, s.overall);
    if tuple(neutral) != (0.0, 0.0, 0.0)
        || tuple(top) != (3.0, 3.0, 3.0)
        || tuple(split) != (3.0, -3.0, 0.0)
    {
        return Err(format!(
            "UEQ-S vectors gave {neutral:?}, {top:?}, {split:?}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a5);
    for _ in 0..10_000 {
        let a: [u8; 10] = std::array::from_fn(|_| rng.random_range(1..=5));
        let s = sus(a)?;
        if !(0.0..=100.0).contains(&s) || s != hand_sus(&a) {
            return Err(format!("SUS {a:?} -> {s}"));
        }
        let b: [u8; 8] = std::array::from_fn(|_| rng.random_range(1..=7));
        let u = ueqs(b)?;
        if [u.pragmatic, u.hedonic, u.overall]
            .iter()
            .any(|v| !(-3.0..=3.0).contains(v))
        {
            return Err(format!("UEQ-S {b:?} -> {u:?}"));
        }
    }
    if sus([0, 3, 3, 3, 3, 3, 3, 3, 3, 3]).is_ok() || sus([6, 3, 3, 3, 3, 3, 3, 3, 3, 3]).is_ok() {
        return Err("SUS accepted an out-of-range answer".into());
    }
    if ueqs([8, 4, 4, 4, 4, 4, 4, 4]).is_ok() || score_sus::<f64>(&[3; 9]).is_ok() {
        return Err("invalid vector accepted".into());
    }
    Ok("SUS and UEQ-S vectors exact; 10000 random vectors within bounds".into())
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Confirm,
    ConfirmStale,
    Execute,
    ExecuteByOther,
    GroundTruth,
    Acknowledge,
}

const OPS: [Op; 6] = [
    Op::Confirm,
    Op::ConfirmStale,
    Op::Execute,
    Op::ExecuteByOther,
    Op::GroundTruth,
    Op::Acknowledge,
];

fn state_machine_fuzz() -> Check {
    let w = World::new();
    w.certify().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let mut acked: BTreeSet<&str> = BTreeSet::new();
    let mut executed = 0;
    for seq in 0..10_000 {
        let (user, mode) = match rng.random_range(0..3) {
            0 => ("clin", Mode::Clinical),
            1 => ("clin", Mode::Academic),
            _ => ("researcher", Mode::Academic),
        };
        let mut doc = common::varied_case(seq);
        let blocked = rng.random_bool(0.15);
        if blocked {
            doc = common::without_variable(doc, "albumin");
        }
        let job = w
            .draft(user, mode, doc)
            .map_err(|e| format!("seq {seq}: create: {e}"))?;
        let mut model = JobState::Draft;
        for _ in 0..rng.random_range(1..=6) {
            let op = OPS[rng.random_range(0..OPS.len())];
            let p = &w.platform;
            let id = job.job_id.as_str();
            let result = match op {
                Op::Confirm => p
                    .confirm_job(w.caller(user), id, ConfirmRequest::default())
                    .map(|_| ()),
                Op::ConfirmStale => p
                    .confirm_job(
                        w.caller(user),
                        id,
                        ConfirmRequest {
                            limitations_hash: Some("0".repeat(64)),
                        },
                    )
                    .map(|_| ()),
                Op::Execute => p.execute_job(w.caller(user), id).map(|_| ()),
                Op::ExecuteByOther => p.execute_job(w.caller("clin_b"), id).map(|_| ()),
                Op::GroundTruth => p
                    .submit_ground_truth(
                        w.caller("clin"),
                        id,
                        OutcomeInput::PerEndpoint(BTreeMap::from([
                            ("survival_1y".to_string(), Value::Bool(seq % 2 == 0)),
                            ("qol_1y".to_string(), Value::Bool(seq % 3 == 0)),
                        ])),
                    )
                    .map(|_| ()),
                Op::Acknowledge => p
                    .acknowledge_disclaimer(
                        w.caller(user),
                        common::SERVICE,
                        AckRequest { text: None },
                    )
                    .map(|_| ()),
            };
            let expected = match op {
                Op::Confirm
                    if model == JobState::Draft
                        && !blocked
                        && (mode == Mode::Clinical || acked.contains(user)) =>
                {
                    JobState::Confirmed
                }
                Op::Execute if model == JobState::Confirmed => JobState::Executed,
                Op::GroundTruth if model == JobState::Executed && user == "clin" => {
                    JobState::Closed
                }
                Op::Acknowledge => {
                    acked.insert(user);
                    model
                }
                _ => model,
            };
            let should_succeed = expected != model || matches!(op, Op::Acknowledge);
            match (&result, should_succeed) {
                (Ok(()), false) => {
                    return Err(format!(
                        "seq {seq}: {op:?} in {model} unexpectedly succeeded"
                    ))
                }
                (Err(e), true) => return Err(format!("seq {seq}: {op:?} in {model} failed: {e}")),
                (Err(e), false)
                    if e.kind == ErrorKind::Internal || e.kind == ErrorKind::Upstream =>
                {
                    return Err(format!("seq {seq}: {op:?} gave {e}"));
                }
                _ => {}
            }
            if expected == JobState::Executed {
                executed += 1;
            }
            model = expected;
        }
        let stored = w
            .platform
            .get_job(Caller::System, &job.job_id)
            .map_err(|e| e.to_string())?;
        if stored.state != model {
            return Err(format!(
                "seq {seq}: platform state {} but model {model}",
                stored.state
            ));
        }
        if stored.state >= JobState::Executed && stored.confirmation.is_none() {
            return Err(format!("seq {seq}: executed without confirmation"));
        }
    }
    let jobs: Vec<PredictionJob> = w
        .platform
        .list_jobs(Caller::System, None, None)
        .map_err(|e| e.to_string())?;
    if jobs.len() != 10_000 {
        return Err(format!("{} jobs on record", jobs.len()));
    }
    let mut trail: BTreeMap<String, Vec<JobState>> = BTreeMap::new();
    for r in w.platform.audit_records() {
        let state = match r.action {
            AuditAction::JobCreated => JobState::Draft,
            AuditAction::JobConfirmed => JobState::Confirmed,
            AuditAction::JobExecuted => JobState::Executed,
            AuditAction::GroundTruthSubmitted => JobState::Closed,
            _ => continue,
        };
        let id = r.detail["job_id"]
            .as_str()
            .ok_or("transition record without job id")?;
        trail.entry(id.to_string()).or_default().push(state);
    }
    for job in &jobs {
        let replay = trail.get(&job.job_id).cloned().unwrap_or_default();
        let transitions: Vec<JobState> = job.transitions.iter().map(|t| t.state).collect();
        if replay != transitions {
            return Err(format!(
                "job {}: audit replay {replay:?} vs transitions {transitions:?}",
                job.job_id
            ));
        }
        let exec = replay.iter().position(|s| *s == JobState::Executed);
        let conf = replay.iter().position(|s| *s == JobState::Confirmed);
        if exec.is_some() && !matches!((conf, exec), (Some(c), Some(e)) if c < e) {
            return Err(format!(
                "job {}: executed without a prior confirmation",
                job.job_id
            ));
        }
    }
    Ok(format!(
        "10000 sequences, {executed} executions, every transition on the audit trail"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("table 1 scenario suite", table1),
        ("coverage matrix golden", coverage_golden),
        ("xai exact efficiency and oracle", xai_exact),
        ("xai sampled within 3 SE", xai_sampled),
        ("audit tamper detection", audit_tamper),
        ("metric oracles", metric_oracles),
        ("instrument scoring", instruments),
        ("job state-machine fuzz", state_machine_fuzz),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({:.2?})", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("PASS api-level only: no console build involved");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

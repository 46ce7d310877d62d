//! Certification records, regulation gating, disclaimer acknowledgements and
//! the risk coverage matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::digest_str;

pub const DEFAULT_DISCLAIMER: &str = "Only for academic purposes";

/// Member states covered by a record whose jurisdiction is `EU`.
pub const EU_MEMBER_STATES: [&str; 27] = [
    "AT", "BE", "BG", "CY", "CZ", "DE", "DK", "EE", "ES", "FI", "FR", "GR", "HR", "HU", "IE", "IT",
    "LT", "LU", "LV", "MT", "NL", "PL", "PT", "RO", "SE", "SI", "SK",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Clinical,
    Academic,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clinical" => Ok(Mode::Clinical),
            "academic" => Ok(Mode::Academic),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Clinical => "clinical",
            Mode::Academic => "academic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Scheme {
    CeMdr2017745,
    Fda,
    Other(String),
}

impl From<String> for Scheme {
    fn from(s: String) -> Self {
        match s.as_str() {
            "CE_MDR_2017_745" => Scheme::CeMdr2017745,
            "FDA" => Scheme::Fda,
            _ => Scheme::Other(s),
        }
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::CeMdr2017745 => "CE_MDR_2017_745".into(),
            Scheme::Fda => "FDA".into(),
            Scheme::Other(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewCertification {
    pub scheme: Scheme,
    pub certificate_number: String,
    pub jurisdictions: BTreeSet<String>,
    pub valid_from: NaiveDate,
    pub valid_to: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificationRecord {
    pub record_id: String,
    pub service_id: String,
    pub scheme: Scheme,
    pub certificate_number: String,
    pub jurisdictions: BTreeSet<String>,
    pub valid_from: NaiveDate,
    pub valid_to: NaiveDate,
}

impl CertificationRecord {
    pub fn covers_jurisdiction(&self, jurisdiction: &str) -> bool {
        let j = jurisdiction.to_ascii_uppercase();
        self.jurisdictions.iter().any(|r| {
            let r = r.to_ascii_uppercase();
            r == j || (r == "EU" && EU_MEMBER_STATES.contains(&j.as_str()))
        })
    }

    pub fn valid_at(&self, at: NaiveDate) -> bool {
        self.valid_from <= at && at <= self.valid_to
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegulationDecision {
    pub service_id: String,
    pub jurisdiction: String,
    pub mode: Mode,
    pub at: NaiveDate,
    /// The job may proceed in the requested mode.
    pub allowed: bool,
    pub clinical_allowed: bool,
    pub disclaimer_required: bool,
    pub reasons: Vec<String>,
    pub matched_record: Option<String>,
}

/// Pure over the given records.
pub fn check_regulation(
    service_id: &str,
    records: &[CertificationRecord],
    jurisdiction: &str,
    mode: Mode,
    at: NaiveDate,
) -> RegulationDecision {
    let in_jurisdiction: Vec<&CertificationRecord> = records
        .iter()
        .filter(|r| r.covers_jurisdiction(jurisdiction))
        .collect();
    let matched = in_jurisdiction.iter().find(|r| r.valid_at(at));
    let mut reasons = Vec::new();
    if matched.is_none() {
        if records.is_empty() {
            reasons.push("no certification on record".to_string());
        } else if in_jurisdiction.is_empty() {
            reasons.push(format!("no certification for jurisdiction {jurisdiction}"));
        } else if in_jurisdiction.iter().any(|r| r.valid_to < at) {
            reasons.push("certificate expired".to_string());
        } else {
            reasons.push("certificate not yet valid".to_string());
        }
    }
    let clinical_allowed = matched.is_some();
    RegulationDecision {
        service_id: service_id.to_string(),
        jurisdiction: jurisdiction.to_string(),
        mode,
        at,
        allowed: clinical_allowed || mode == Mode::Academic,
        clinical_allowed,
        disclaimer_required: mode == Mode::Academic,
        reasons,
        matched_record: matched.map(|r| r.record_id.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisclaimerAcknowledgement {
    pub ack_id: String,
    pub user_id: String,
    pub service_id: String,
    pub disclaimer_text_hash: String,
    #[serde(with = "crate::timefmt::millis")]
    pub acknowledged_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Requirement {
    AiPassport,
    UserManagement,
    RegulationCheck,
    AcademicDisclaimer,
    DataQualityAssessment,
    CliniciansDoubleCheck,
    ContinuousPerformanceEvaluation,
    AuditTrail,
    ContinuousUsabilityTest,
    ReviewOfCases,
    BiasCheck,
    ExplainableAi,
    EncryptionAndLibraries,
    SemanticInteroperability,
}

impl Requirement {
    pub const ALL: [Requirement; 14] = [
        Requirement::AiPassport,
        Requirement::UserManagement,
        Requirement::RegulationCheck,
        Requirement::AcademicDisclaimer,
        Requirement::DataQualityAssessment,
        Requirement::CliniciansDoubleCheck,
        Requirement::ContinuousPerformanceEvaluation,
        Requirement::AuditTrail,
        Requirement::ContinuousUsabilityTest,
        Requirement::ReviewOfCases,
        Requirement::BiasCheck,
        Requirement::ExplainableAi,
        Requirement::EncryptionAndLibraries,
        Requirement::SemanticInteroperability,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Risk {
    pub id: u8,
    pub name: &'static str,
    pub mitigated_by: &'static [Requirement],
}

use Requirement as R;

pub const RISK_MATRIX: [Risk; 7] = [
    Risk {
        id: 1,
        name: "patient harm due to AI errors",
        mitigated_by: &[
            R::AiPassport,
            R::DataQualityAssessment,
            R::CliniciansDoubleCheck,
            R::ContinuousPerformanceEvaluation,
        ],
    },
    Risk {
        id: 2,
        name: "misuse of medical AI tools",
        mitigated_by: &[R::AiPassport, R::UserManagement, R::ContinuousUsabilityTest],
    },
    Risk {
        id: 3,
        name: "bias and perpetuation of inequities",
        mitigated_by: &[R::AiPassport, R::CliniciansDoubleCheck, R::BiasCheck],
    },
    Risk {
        id: 4,
        name: "lack of transparency",
        mitigated_by: &[
            R::AiPassport,
            R::UserManagement,
            R::AcademicDisclaimer,
            R::CliniciansDoubleCheck,
            R::AuditTrail,
            R::ReviewOfCases,
            R::BiasCheck,
            R::ExplainableAi,
        ],
    },
    Risk {
        id: 5,
        name: "privacy and security issues",
        mitigated_by: &[R::UserManagement, R::EncryptionAndLibraries],
    },
    Risk {
        id: 6,
        name: "gaps in accountability",
        mitigated_by: &[
            R::AiPassport,
            R::UserManagement,
            R::RegulationCheck,
            R::AcademicDisclaimer,
            R::CliniciansDoubleCheck,
            R::AuditTrail,
            R::BiasCheck,
            R::ExplainableAi,
            R::EncryptionAndLibraries,
        ],
    },
    Risk {
        id: 7,
        name: "obstacles in implementation",
        mitigated_by: &[
            R::DataQualityAssessment,
            R::CliniciansDoubleCheck,
            R::ContinuousPerformanceEvaluation,
            R::ContinuousUsabilityTest,
            R::BiasCheck,
            R::SemanticInteroperability,
            R::ExplainableAi,
        ],
    },
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskCoverage {
    pub risk_id: u8,
    pub name: String,
    pub mitigating: Vec<Requirement>,
    pub enabled: Vec<Requirement>,
    pub gaps: Vec<Requirement>,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub service_id: String,
    pub enabled: BTreeSet<Requirement>,
    pub risks: Vec<RiskCoverage>,
}

pub fn coverage_report(service_id: &str, enabled: &BTreeSet<Requirement>) -> CoverageReport {
    let risks = RISK_MATRIX
        .iter()
        .map(|risk| {
            let (on, gaps): (Vec<Requirement>, Vec<Requirement>) =
                risk.mitigated_by.iter().partition(|r| enabled.contains(r));
            RiskCoverage {
                risk_id: risk.id,
                name: risk.name.to_string(),
                mitigating: risk.mitigated_by.to_vec(),
                covered: !on.is_empty(),
                enabled: on,
                gaps,
            }
        })
        .collect();
    CoverageReport {
        service_id: service_id.to_string(),
        enabled: enabled.clone(),
        risks,
    }
}

/// What the platform can show for a service. Each flag turns on the
/// requirements it evidences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub passport_registered: bool,
    pub access_control: bool,
    pub has_certification: bool,
    pub disclaimer_flow: bool,
    pub quality_gate: bool,
    pub confirmation_step: bool,
    pub has_performance_snapshot: bool,
    pub audit_chain_intact: bool,
    pub has_usability_evaluation: bool,
    pub has_review_session: bool,
    pub has_bias_evaluation: bool,
    pub attributions: bool,
    pub transport_encrypted: bool,
    pub unit_mapping: bool,
}

pub fn enabled_requirements(
    evidence: &Evidence,
    disabled: &BTreeSet<Requirement>,
) -> BTreeSet<Requirement> {
    [
        (evidence.passport_registered, R::AiPassport),
        (evidence.access_control, R::UserManagement),
        (evidence.has_certification, R::RegulationCheck),
        (evidence.disclaimer_flow, R::AcademicDisclaimer),
        (evidence.quality_gate, R::DataQualityAssessment),
        (evidence.confirmation_step, R::CliniciansDoubleCheck),
        (
            evidence.has_performance_snapshot,
            R::ContinuousPerformanceEvaluation,
        ),
        (evidence.audit_chain_intact, R::AuditTrail),
        (
            evidence.has_usability_evaluation,
            R::ContinuousUsabilityTest,
        ),
        (evidence.has_review_session, R::ReviewOfCases),
        (evidence.has_bias_evaluation, R::BiasCheck),
        (evidence.attributions, R::ExplainableAi),
        (evidence.transport_encrypted, R::EncryptionAndLibraries),
        (evidence.unit_mapping, R::SemanticInteroperability),
    ]
    .into_iter()
    .filter(|(on, r)| *on && !disabled.contains(r))
    .map(|(_, r)| r)
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ComplianceError {
    #[error("valid_from is after valid_to")]
    InvertedValidity,
    #[error("certification must name at least one jurisdiction")]
    NoJurisdiction,
    #[error("certificate number must not be empty")]
    EmptyCertificateNumber,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compliance {
    disclaimer_text: String,
    certifications: BTreeMap<String, Vec<CertificationRecord>>,
    acknowledgements: Vec<DisclaimerAcknowledgement>,
    disabled: BTreeMap<String, BTreeSet<Requirement>>,
}

impl Default for Compliance {
    fn default() -> Self {
        Self::new(DEFAULT_DISCLAIMER)
    }
}

impl Compliance {
    pub fn new(disclaimer_text: &str) -> Self {
        Self {
            disclaimer_text: disclaimer_text.to_string(),
            certifications: BTreeMap::new(),
            acknowledgements: Vec::new(),
            disabled: BTreeMap::new(),
        }
    }

    pub fn disclaimer_text(&self) -> &str {
        &self.disclaimer_text
    }

    pub fn disclaimer_hash(&self) -> String {
        digest_str(&self.disclaimer_text)
    }

    pub fn set_disclaimer_text(&mut self, text: &str) {
        self.disclaimer_text = text.to_string();
    }

    pub fn add_certification(
        &mut self,
        service_id: &str,
        record_id: String,
        new: NewCertification,
    ) -> Result<CertificationRecord, ComplianceError> {
        if new.valid_from > new.valid_to {
            return Err(ComplianceError::InvertedValidity);
        }
        if new.jurisdictions.iter().all(|j| j.trim().is_empty()) {
            return Err(ComplianceError::NoJurisdiction);
        }
        if new.certificate_number.trim().is_empty() {
            return Err(ComplianceError::EmptyCertificateNumber);
        }
        let record = CertificationRecord {
            record_id,
            service_id: service_id.to_string(),
            scheme: new.scheme,
            certificate_number: new.certificate_number,
            jurisdictions: new
                .jurisdictions
                .into_iter()
                .map(|j| j.trim().to_ascii_uppercase())
                .collect(),
            valid_from: new.valid_from,
            valid_to: new.valid_to,
        };
        self.certifications
            .entry(service_id.to_string())
            .or_default()
            .push(record.clone());
        Ok(record)
    }

    pub fn certifications(&self, service_id: &str) -> &[CertificationRecord] {
        self.certifications
            .get(service_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn check(
        &self,
        service_id: &str,
        jurisdiction: &str,
        mode: Mode,
        at: NaiveDate,
    ) -> RegulationDecision {
        check_regulation(
            service_id,
            self.certifications(service_id),
            jurisdiction,
            mode,
            at,
        )
    }

    pub fn acknowledge(
        &mut self,
        ack_id: String,
        user_id: &str,
        service_id: &str,
        shown_text: &str,
        now: DateTime<Utc>,
    ) -> DisclaimerAcknowledgement {
        let ack = DisclaimerAcknowledgement {
            ack_id,
            user_id: user_id.to_string(),
            service_id: service_id.to_string(),
            disclaimer_text_hash: digest_str(shown_text),
            acknowledged_at: now,
        };
        self.acknowledgements.push(ack.clone());
        ack
    }

    /// Latest acknowledgement of the currently configured text.
    pub fn current_ack(
        &self,
        user_id: &str,
        service_id: &str,
    ) -> Option<&DisclaimerAcknowledgement> {
        let hash = self.disclaimer_hash();
        self.acknowledgements.iter().rev().find(|a| {
            a.user_id == user_id && a.service_id == service_id && a.disclaimer_text_hash == hash
        })
    }

    pub fn acknowledgements(&self) -> &[DisclaimerAcknowledgement] {
        &self.acknowledgements
    }

    pub fn disabled(&self, service_id: &str) -> BTreeSet<Requirement> {
        self.disabled.get(service_id).cloned().unwrap_or_default()
    }

    pub fn set_disabled(&mut self, service_id: &str, disabled: BTreeSet<Requirement>) {
        self.disabled.insert(service_id.to_string(), disabled);
    }
}

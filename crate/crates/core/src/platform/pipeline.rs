//! Case preparation shared by job creation, dry-run ingestion and the
//! quality endpoints: profile mapping, unit normalization, assessment.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::interop::{
    apply_profile, convert_units, ClinicalCase, ConversionFailure, InteropError, MappingProfile,
    UnitTable,
};
use crate::quality::{
    assess_case, assess_dataset, Check, ConsistencyRule, HardFailure, QualityError, QualityReport,
    Verdict,
};
use crate::registry::{DeclaredDimension, VariableSpec};

#[derive(Debug, Clone, Copy)]
pub struct CaseContext<'a> {
    pub schema: &'a [VariableSpec],
    pub declared: &'a BTreeMap<DeclaredDimension, String>,
    pub profile: &'a MappingProfile,
    pub units: &'a UnitTable,
    pub rules: &'a [ConsistencyRule],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedCase {
    /// Normalized case. Variables that failed conversion keep their raw value.
    pub case: ClinicalCase,
    pub unrecognized: Vec<String>,
    pub conversion_failures: Vec<ConversionFailure>,
    pub quality: QualityReport,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Interop(#[from] InteropError),
    #[error(transparent)]
    Quality(#[from] QualityError),
}

/// Returns the case to keep, the case to assess (failed variables removed)
/// and the failures.
fn normalize(
    case: &ClinicalCase,
    ctx: &CaseContext<'_>,
) -> Result<(ClinicalCase, ClinicalCase, Vec<ConversionFailure>), InteropError> {
    match convert_units(case, ctx.schema, ctx.units) {
        Ok(c) => Ok((c.clone(), c, Vec::new())),
        Err(InteropError::Conversion(failures)) => {
            let failed: BTreeSet<&str> = failures.iter().map(|f| f.variable.as_str()).collect();
            let mut rest = case.clone();
            rest.variables.retain(|k, _| !failed.contains(k.as_str()));
            let assessed = convert_units(&rest, ctx.schema, ctx.units)?;
            let mut kept = assessed.clone();
            for name in &failed {
                if let Some(obs) = case.variables.get(*name) {
                    kept.variables.insert(name.to_string(), obs.clone());
                }
            }
            Ok((kept, assessed, failures))
        }
        Err(other) => Err(other),
    }
}

pub fn prepare_case(
    raw: &ClinicalCase,
    ctx: &CaseContext<'_>,
) -> Result<PreparedCase, PipelineError> {
    let mapped = apply_profile(raw, ctx.profile)?;
    let (case, assessed, failures) = normalize(&mapped.case, ctx)?;
    let mut quality = assess_case(&assessed, ctx.schema, ctx.rules)?;
    let failed: BTreeSet<&str> = failures.iter().map(|f| f.variable.as_str()).collect();
    quality
        .hard_failures
        .retain(|h| !(h.check == Check::Missing && failed.contains(h.variable.as_str())));
    if quality.hard_failures.is_empty() {
        quality.verdict = Verdict::Pass;
    }
    let quality = quality
        .with_conversion_failures(&failures)
        .with_declared(ctx.declared);
    Ok(PreparedCase {
        case,
        unrecognized: mapped.unrecognized,
        conversion_failures: failures,
        quality,
    })
}

/// Dataset report. Conversion failures are reported per case and block.
pub fn prepare_dataset(
    dataset_id: &str,
    raws: &[ClinicalCase],
    ctx: &CaseContext<'_>,
) -> Result<QualityReport, PipelineError> {
    let mut assessed = Vec::with_capacity(raws.len());
    let mut conversion = Vec::new();
    for raw in raws {
        let mapped = apply_profile(raw, ctx.profile)?;
        let (_, a, failures) = normalize(&mapped.case, ctx)?;
        conversion.extend(failures.into_iter().map(|f| HardFailure {
            case_id: Some(raw.case_id.clone()),
            variable: f.variable,
            check: Check::UnitConversion,
            detail: f.detail,
        }));
        assessed.push(a);
    }
    let mut report = assess_dataset(dataset_id, &assessed, ctx.schema, ctx.rules)?;
    if !conversion.is_empty() {
        report.hard_failures.extend(conversion);
        report.verdict = Verdict::Block;
    }
    Ok(report.with_declared(ctx.declared))
}

//! Per-case Shapley attributions for black-box models.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interop::Value;
use crate::num::Scalar;
use crate::registry::{AiPassport, ValueType, VariableSpec};

pub const DEFAULT_EXACT_MAX_DIMS: usize = 12;
pub const DEFAULT_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Enumerate all coalitions when the feature count is at most this.
    pub exact_max_dims: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
            exact_max_dims: DEFAULT_EXACT_MAX_DIMS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactShapley,
    SampledShapley,
    Native,
}

/// Raw Shapley estimate, positional over features.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyValues<T> {
    pub phi: Vec<T>,
    /// Standard error of each estimate; sampled method only.
    pub std_error: Option<Vec<T>>,
    pub prediction: T,
    pub baseline_prediction: T,
}

fn mixture<V: Clone>(case: &[V], baseline: &[V], mask: u64) -> Vec<V> {
    (0..case.len())
        .map(|i| {
            if mask >> i & 1 == 1 {
                case[i].clone()
            } else {
                baseline[i].clone()
            }
        })
        .collect()
}

fn binomial<T: Scalar>(n: usize, k: usize) -> T {
    let mut c = 1u64;
    for i in 0..k as u64 {
        c = c * (n as u64 - i) / (i + 1);
    }
    T::of_usize(c as usize)
}

/// Exact Shapley values by enumerating all `2^d` coalitions.
///
/// Kernel weight `s!(d-s-1)!/d!` is computed as `1 / (d * C(d-1, s))`.
pub fn exact_shapley<V, T, E, F>(
    case: &[V],
    baseline: &[V],
    mut f: F,
) -> Result<ShapleyValues<T>, E>
where
    V: Clone,
    T: Scalar,
    F: FnMut(&[V]) -> Result<T, E>,
{
    assert_eq!(
        case.len(),
        baseline.len(),
        "case and baseline differ in length"
    );
    let d = case.len();
    assert!(d < 63, "too many features for exact enumeration");
    let full = (1u64 << d) - 1;
    let mut values = Vec::with_capacity(1 << d);
    for mask in 0..=full {
        values.push(f(&mixture(case, baseline, mask))?);
    }
    let weights: Vec<T> = (0..d.max(1))
        .map(|s| T::one() / (T::of_usize(d) * binomial::<T>(d - 1, s)))
        .collect();
    let mut phi = vec![T::zero(); d];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for mask in (0..=full).filter(|m| m & bit == 0) {
            let s = mask.count_ones() as usize;
            *p += weights[s] * (values[(mask | bit) as usize] - values[mask as usize]);
        }
    }
    Ok(ShapleyValues {
        phi,
        std_error: None,
        prediction: values[full as usize],
        baseline_prediction: values[0],
    })
}

/// Permutation-sampling Shapley estimate with a seeded generator.
///
/// Each permutation walks from the baseline to the case one feature at a
/// time, so per-permutation marginals telescope to `f(x) - f(z)`.
pub fn sampled_shapley<V, T, E, F>(
    case: &[V],
    baseline: &[V],
    n_samples: usize,
    seed: u64,
    mut f: F,
) -> Result<ShapleyValues<T>, E>
where
    V: Clone,
    T: Scalar,
    F: FnMut(&[V]) -> Result<T, E>,
{
    assert_eq!(
        case.len(),
        baseline.len(),
        "case and baseline differ in length"
    );
    assert!(n_samples >= 2, "need at least two permutations");
    let d = case.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d).collect();
    let mut sum = vec![T::zero(); d];
    let mut sum_sq = vec![T::zero(); d];
    let baseline_prediction = f(baseline)?;
    let prediction = f(case)?;
    for _ in 0..n_samples {
        order.shuffle(&mut rng);
        let mut x = baseline.to_vec();
        let mut prev = baseline_prediction;
        for (k, &j) in order.iter().enumerate() {
            x[j] = case[j].clone();
            // The last step reaches the full case; reuse its known value.
            let cur = if k + 1 == d { prediction } else { f(&x)? };
            let m = cur - prev;
            sum[j] += m;
            sum_sq[j] += m * m;
            prev = cur;
        }
    }
    let n = T::of_usize(n_samples);
    let phi: Vec<T> = sum.iter().map(|&s| s / n).collect();
    let std_error = phi
        .iter()
        .zip(&sum_sq)
        .map(|(&mean, &sq)| {
            let var = ((sq - n * mean * mean) / (n - T::one())).max(T::zero());
            (var / n).sqrt()
        })
        .collect();
    Ok(ShapleyValues {
        phi,
        std_error: Some(std_error),
        prediction,
        baseline_prediction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution<T = f64> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    /// Output variable explained.
    pub output: String,
    pub baseline: BTreeMap<String, Value>,
    pub prediction: T,
    pub baseline_prediction: T,
    pub contributions: BTreeMap<String, T>,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<BTreeMap<String, T>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum XaiError<E> {
    #[error("no baseline value for feature `{0}`")]
    MissingBaseline(String),
    #[error("case has no features")]
    NoFeatures,
    #[error("model evaluation failed: {0}")]
    Model(E),
}

/// Attribute one output of `model` over the features of `case`.
///
/// A model failure at any point aborts the computation; nothing partial is
/// returned.
pub fn explain<T, E, F>(
    output: &str,
    case: &BTreeMap<String, Value>,
    baseline: &BTreeMap<String, Value>,
    config: &ExplainConfig,
    mut model: F,
) -> Result<Attribution<T>, XaiError<E>>
where
    T: Scalar,
    F: FnMut(&BTreeMap<String, Value>) -> Result<T, E>,
{
    if case.is_empty() {
        return Err(XaiError::NoFeatures);
    }
    let names: Vec<&String> = case.keys().collect();
    let x: Vec<Value> = case.values().cloned().collect();
    let z: Vec<Value> = names
        .iter()
        .map(|n| {
            baseline
                .get(*n)
                .cloned()
                .ok_or_else(|| XaiError::MissingBaseline((*n).clone()))
        })
        .collect::<Result<_, _>>()?;
    let eval = |v: &[Value]| {
        let input: BTreeMap<String, Value> = names
            .iter()
            .map(|n| (*n).clone())
            .zip(v.iter().cloned())
            .collect();
        model(&input)
    };
    let (sv, method) = if names.len() <= config.exact_max_dims {
        (exact_shapley(&x, &z, eval), Method::ExactShapley)
    } else {
        (
            sampled_shapley(&x, &z, config.n_samples, config.seed, eval),
            Method::SampledShapley,
        )
    };
    let sv = sv.map_err(XaiError::Model)?;
    let keyed = |v: &[T]| {
        names
            .iter()
            .map(|n| (*n).clone())
            .zip(v.iter().copied())
            .collect()
    };
    let sampled = method == Method::SampledShapley;
    Ok(Attribution {
        job_id: None,
        output: output.to_string(),
        baseline: names.iter().map(|n| (*n).clone()).zip(z).collect(),
        prediction: sv.prediction,
        baseline_prediction: sv.baseline_prediction,
        contributions: keyed(&sv.phi),
        method,
        n_samples: sampled.then_some(config.n_samples),
        seed: sampled.then_some(config.seed),
        std_error: sv.std_error.as_deref().map(keyed),
    })
}

/// Baseline for a service: declared training medians, then for undeclared
/// numeric inputs the midpoint of the valid range, for categorical inputs the
/// first category. Inputs with neither fall back to the case's own value, which
/// gives them a zero contribution.
pub fn default_baseline(
    passport: &AiPassport,
    case: &BTreeMap<String, Value>,
) -> BTreeMap<String, Value> {
    case.iter()
        .map(|(name, own)| {
            let declared = passport
                .training_descriptor
                .feature_medians
                .get(name)
                .cloned();
            let fallback = || passport.input(name).and_then(schema_fallback);
            (
                name.clone(),
                declared.or_else(fallback).unwrap_or_else(|| own.clone()),
            )
        })
        .collect()
}

fn schema_fallback(spec: &VariableSpec) -> Option<Value> {
    match spec.value_type {
        ValueType::Numeric => spec
            .valid_range
            .map(|[lo, hi]| Value::Number((lo + hi) / 2.0)),
        ValueType::Categorical => spec
            .categories
            .as_ref()
            .and_then(|c| c.first())
            .map(|c| Value::Text(c.clone())),
        _ => None,
    }
}

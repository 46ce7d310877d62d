//! Governance gateway between clinical users and AI model services.
//!
//! [`platform::Platform`] ties the modules together; each module is usable on
//! its own. Numeric kernels are generic over [`num::Scalar`]; the aliases
//! below fix them to `f64`.

pub mod audit;
pub mod bias;
pub mod clock;
pub mod compliance;
pub mod digest;
pub mod gateway;
pub mod iam;
pub mod ids;
pub mod interop;
pub mod monitor;
pub mod num;
pub mod platform;
pub mod quality;
pub mod registry;
pub mod review;
pub mod stats;
pub mod timefmt;
pub mod usability;
pub mod xai;

pub type Attribution = xai::Attribution<f64>;
pub type ShapleyValues = xai::ShapleyValues<f64>;
pub type Metrics = monitor::Metrics<f64>;
pub type UeqsScore = usability::UeqsScore<f64>;
pub type LabeledRow = bias::LabeledRow<f64>;
pub type GroupMetrics = bias::GroupMetrics<f64>;
pub type AttributeReport = bias::AttributeReport<f64>;

pub use platform::{Caller, Platform, PlatformConfig, PlatformError};

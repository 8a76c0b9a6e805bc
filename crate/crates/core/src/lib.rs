//! Multi-tab website fingerprint detection.
//!
//! Untrimmed Tor traffic is encoded as signed burst lengths, a 1D anchor-based
//! detector proposes `(start, end, website)` segments, and detections are scored
//! with interval-IoU based average precision and a megabytes-per-second
//! throughput figure.
//!
//! The numerical core is generic over the scalar type ([`Scalar`], `f32` or
//! `f64`); the aliases below name the common instantiations.

pub mod detector;
pub mod error;
pub mod eval;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Segment32 = trace::Segment<f32>;
pub type Segment64 = trace::Segment<f64>;
pub type Detector32 = detector::DetectorModel<f32>;
pub type Detector64 = detector::DetectorModel<f64>;

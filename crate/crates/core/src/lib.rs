//! Multiuser MIMO detection with variational Bayes.
//!
//! The crate provides the detectors compared in the benchmark harness:
//!
//! * one-shot LMMSE,
//! * AMP and OAMP/VAMP (message passing),
//! * MF-SIC and LMMSE-SIC (soft interference cancellation),
//! * conv-VB, MF-VB, LMMSE-VB and MF-VB-M (variational Bayes),
//!
//! together with channel generators, pilot-based MMSE channel estimation and a
//! Monte-Carlo SER engine. Numerical code is generic over [`Real`] (`f32` or
//! `f64`); the aliases below fix the scalar for the common `f64` case.

pub mod channels;
pub mod constellation;
pub mod detectors;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod scalar;
pub mod selftest;

pub use channels::{ChannelScenario, Covariance, EstimationContext, PilotMatrix};
pub use constellation::{denoise, make_constellation, map_slice, Constellation, DenoiserResult, Modulation, Scheme};
pub use detectors::{DetectorConfig, DetectorKind, DetectorOutput};
pub use error::{Error, Result};
pub use scalar::Real;

pub type Constellation64 = Constellation<f64>;
pub type Constellation32 = Constellation<f32>;
pub type ChannelScenario64 = ChannelScenario<f64>;
pub type ChannelScenario32 = ChannelScenario<f32>;
pub type EstimationContext64 = EstimationContext<f64>;
pub type DetectorOutput64 = DetectorOutput<f64>;
pub type DetectorOutput32 = DetectorOutput<f32>;
pub type Complex64 = num_complex::Complex<f64>;
pub type Complex32 = num_complex::Complex<f32>;
pub type CMatrix64 = scalar::CMatrix<f64>;
pub type CVector64 = scalar::CVector<f64>;

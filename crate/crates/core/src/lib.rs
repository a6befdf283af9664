//! Layer-wise adversarial example detection.
//!
//! The detector reads the internal representations of a classifier and flags
//! inputs whose layer-to-layer feature transitions look abnormal:
//!
//! * **Recovery testing** ([`recovery`]) trains per-layer inverse regressors
//!   that predict each intermediate embedding from the final one; adversarial
//!   inputs leave large, sharply peaked reconstruction errors.
//! * **Logit probing** ([`logit_probe`]) applies a handful of learned linear
//!   input augmentations and compares logit instability against feature drift.
//! * **Score fusion** ([`fusion`]) maps both scores through benign empirical
//!   CDFs onto a standard normal scale and sums the squares, yielding a
//!   chi-square-like fused score with calibrated thresholds.
//!
//! [`attacks`] provides the white-box attack suite (FGSM, PGD, CW, and a
//! detector-aware adaptive attack) used to evaluate the detector, and [`eval`]
//! the metrics / reporting harness. [`pipeline`] wires everything into the
//! calibrate / attack / evaluate / ablate commands exposed by the CLI crate.
//!
//! All numeric code is generic over the scalar type via [`scalar::Real`]
//! (`f32` for the production pipeline, `f64` where tests need tight
//! tolerances); concrete aliases for the default pipeline live at the crate
//! root.

pub mod artifact;
pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod logit_probe;
pub mod math;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod recovery;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

/// Scalar type used by the production pipeline.
pub type DefaultScalar = f32;

/// Image / activation tensor at pipeline precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by oracles and gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;

/// Pipeline-precision aliases for the main domain types.
pub type Classifier = model::ClassifierState<DefaultScalar>;
pub type Trace = model::LayerTrace<DefaultScalar>;
pub type Recovery = recovery::RecoveryBank<DefaultScalar>;
pub type Augmentations = logit_probe::AugmentationBank<DefaultScalar>;
pub type Adversarials = attacks::AdvBatch<DefaultScalar>;

/// Version stamp embedded in every persisted artifact.
pub const SCHEMA_VERSION: u32 = 1;

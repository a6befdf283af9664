//! White-box attack suite: FGSM, PGD, Carlini-Wagner, and the
//! detector-aware adaptive attack. Every emitted batch is validated against
//! its L-infinity budget and the pixel range; batches round-trip through a
//! binary archive that doubles as the ingestion point for externally
//! generated attacks.

mod adaptive;
mod cw;
mod linf;

pub use adaptive::{orthogonal_pgd, AdaptiveExample, AdaptiveOutcome, DetectorBundle};
pub use cw::cw;
pub use linf::{fgsm, input_grad_ce, pgd};

use crate::artifact::Container;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
    Adaptive,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
            AttackKind::Adaptive => "adaptive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    #[default]
    Joint,
    Orthogonal,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget in pixel units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub targeted: bool,
    /// Detector-loss weights (adaptive only).
    pub beta1: f64,
    pub beta2: f64,
    pub projection_mode: ProjectionMode,
    pub seed: u64,
    pub random_start: bool,
    /// CW trade-off constant and margin.
    pub cw_c: f64,
    pub cw_kappa: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            targeted: false,
            beta1: 0.0,
            beta2: 0.0,
            projection_mode: ProjectionMode::Joint,
            seed: 0,
            random_start: false,
            cw_c: 1.0,
            cw_kappa: 0.0,
        }
    }

    pub fn pgd(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            steps: 40,
            step_size: epsilon / 10.0,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn cw(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Cw,
            steps: 100,
            step_size: 0.05,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn adaptive(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Adaptive,
            steps: 50,
            step_size: epsilon / 10.0,
            beta1: 1.0,
            beta2: 1.0,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon {} must be finite and non-negative",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(Error::Config("beta weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Tolerance on the budget check, absorbing pixel-level rounding.
pub const BUDGET_SLACK: f64 = 1e-6;

/// A batch of adversarial examples with provenance and validity guarantees.
#[derive(Debug, Clone)]
pub struct AdvBatch<F> {
    pub originals: Tensor<F>,
    pub adversarials: Tensor<F>,
    pub labels: Vec<u32>,
    /// Prediction flipped (untargeted) or target hit (targeted).
    pub success: Vec<bool>,
    pub config: AttackConfig,
    /// Per-example L-infinity distortion.
    pub linf: Vec<f64>,
}

impl<F: Real> AdvBatch<F> {
    /// Validates the budget and range invariants for every example.
    pub fn new(
        originals: Tensor<F>,
        adversarials: Tensor<F>,
        labels: Vec<u32>,
        success: Vec<bool>,
        config: AttackConfig,
    ) -> Result<Self> {
        if originals.shape() != adversarials.shape() {
            return Err(Error::Contract("original/adversarial shape mismatch".into()));
        }
        let n = originals.len();
        if labels.len() != n || success.len() != n {
            return Err(Error::Contract("label/success length mismatch".into()));
        }
        let mut linf = Vec::with_capacity(n);
        for i in 0..n {
            let mut worst = 0.0f64;
            for (&a, &o) in adversarials.item(i).iter().zip(originals.item(i).iter()) {
                let av = a.as_f64();
                if !(0.0..=1.0).contains(&av) {
                    return Err(Error::Validation(format!(
                        "adversarial pixel {av} outside [0,1] in example {i}"
                    )));
                }
                worst = worst.max((av - o.as_f64()).abs());
            }
            if worst > config.epsilon + BUDGET_SLACK {
                return Err(Error::Validation(format!(
                    "example {i} exceeds budget: linf {worst} > epsilon {}",
                    config.epsilon
                )));
            }
            linf.push(worst);
        }
        Ok(AdvBatch {
            originals,
            adversarials,
            labels,
            success,
            config,
            linf,
        })
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    /// Success rate restricted to inputs the model classified correctly
    /// before the attack (needs the clean predictions).
    pub fn success_rate_among_correct(&self, clean_predictions: &[u32]) -> f64 {
        let mut correct = 0usize;
        let mut fooled = 0usize;
        for i in 0..self.len() {
            if clean_predictions[i] == self.labels[i] {
                correct += 1;
                if self.success[i] {
                    fooled += 1;
                }
            }
        }
        if correct == 0 {
            0.0
        } else {
            fooled as f64 / correct as f64
        }
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut c = Container::new("adv_batch");
        c.set_meta(&serde_json::json!({
            "config": self.config,
            "shape": self.originals.shape(),
            "n": self.len(),
        }))?;
        c.push_section("originals", self.originals.shape(), self.originals.data());
        c.push_section(
            "adversarials",
            self.adversarials.shape(),
            self.adversarials.data(),
        );
        let mut label_bytes = Vec::with_capacity(self.labels.len() * 4);
        for l in &self.labels {
            label_bytes.extend_from_slice(&l.to_le_bytes());
        }
        c.push_bytes("labels", label_bytes);
        c.push_bytes(
            "success",
            self.success.iter().map(|&s| s as u8).collect(),
        );
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != "adv_batch" {
            return Err(Error::Validation(format!(
                "expected an adversarial batch container, found {}",
                c.kind
            )));
        }
        let config: AttackConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Validation("batch missing config".into()))?,
        )?;
        let shape = c.section_shape("originals")?.to_vec();
        let originals = Tensor::from_vec(&shape, c.section::<F>("originals")?);
        let adversarials = Tensor::from_vec(&shape, c.section::<F>("adversarials")?);
        let labels: Vec<u32> = c
            .section_bytes("labels")?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let success: Vec<bool> = c
            .section_bytes("success")?
            .iter()
            .map(|&b| b != 0)
            .collect();
        // Re-validate the invariants on ingestion.
        AdvBatch::new(originals, adversarials, labels, success, config)
    }
}

/// Project `adv` onto the epsilon ball around `orig` intersected with
/// [0, 1], elementwise.
pub(crate) fn project_linf<F: Real>(adv: &mut [F], orig: &[F], epsilon: F) {
    for (a, &o) in adv.iter_mut().zip(orig.iter()) {
        let lo = o - epsilon;
        let hi = o + epsilon;
        let mut v = *a;
        if v < lo {
            v = lo;
        }
        if v > hi {
            v = hi;
        }
        if v < F::zero() {
            v = F::zero();
        }
        if v > F::one() {
            v = F::one();
        }
        *a = v;
    }
}

/// Sign with sign(0) = 0.
#[inline]
pub(crate) fn grad_sign<F: Real>(g: F) -> F {
    if g > F::zero() {
        F::one()
    } else if g < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

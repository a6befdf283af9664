//! The evaluation report: every metric with full provenance fingerprints,
//! serialized as versioned JSON. Wall-clock timings go to a separate
//! sidecar so the report itself is byte-deterministic.

use super::shift::ShiftProfile;
use crate::fusion::Measure;
use crate::logit_probe::AugmentationBank;
use crate::model::ClassifierState;
use crate::recovery::RecoveryBank;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Fingerprints {
    pub model: String,
    pub recovery: String,
    pub augment: String,
    pub calibration: String,
    pub config: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AucEntry {
    pub attack: String,
    pub measure: Measure,
    pub auc: f64,
    /// Number of adversarial examples scored (successful ones).
    pub n_adversarial: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaEntry {
    pub attack: String,
    pub measure: Measure,
    pub fpr: f64,
    pub ra: f64,
    pub flagged_fraction: f64,
    pub correct_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackStats {
    pub attack: String,
    pub epsilon: f64,
    pub n: usize,
    pub success_rate: f64,
    pub success_rate_among_correct: f64,
    pub mean_linf: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct ParamCountReport {
    pub classifier: usize,
    pub recovery_heads: usize,
    pub augmentation_ops: usize,
    pub detector_total: usize,
    /// detector params / classifier params.
    pub overhead_ratio: f64,
}

/// Exact parameter totals for the classifier and its detector components.
pub fn parameter_count<F: Real>(
    model: &ClassifierState<F>,
    recovery: Option<&RecoveryBank<F>>,
    augment: Option<&AugmentationBank<F>>,
) -> ParamCountReport {
    let classifier = model.net.param_count();
    let recovery_heads = recovery.map_or(0, |r| r.param_count());
    let augmentation_ops = augment.map_or(0, |a| a.param_count());
    let detector_total = recovery_heads + augmentation_ops;
    ParamCountReport {
        classifier,
        recovery_heads,
        augmentation_ops,
        detector_total,
        overhead_ratio: detector_total as f64 / classifier as f64,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub profile: String,
    pub seed: u64,
    pub fingerprints: Fingerprints,
    pub clean_accuracy: f64,
    pub benign_rlt_mean: f64,
    pub auc: Vec<AucEntry>,
    pub robust_accuracy: Vec<RaEntry>,
    pub attack_stats: Vec<AttackStats>,
    pub shift_profiles: Vec<ShiftProfile>,
    pub params: ParamCountReport,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn auc_of(&self, attack: &str, measure: Measure) -> Option<f64> {
        self.auc
            .iter()
            .find(|e| e.attack == attack && e.measure == measure)
            .map(|e| e.auc)
    }

    pub fn ra_of(&self, attack: &str, measure: Measure, fpr: f64) -> Option<f64> {
        self.robust_accuracy
            .iter()
            .find(|e| e.attack == attack && e.measure == measure && (e.fpr - fpr).abs() < 1e-12)
            .map(|e| e.ra)
    }

    pub fn attacks(&self) -> Vec<String> {
        let mut out: Vec<String> = self.auc.iter().map(|e| e.attack.clone()).collect();
        out.dedup();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logit_probe::{init_augmentations, AugmentConfig};
    use crate::model::{registry, ClassifierNet, TrainConfig, TrainMetrics};
    use crate::rng::SeedStream;

    #[test]
    fn parameter_count_matches_architecture_arithmetic() {
        let mut rng = SeedStream::new(0, "pc");
        let arch = registry()["plain3"].clone();
        let net: ClassifierNet<f32> = ClassifierNet::new(&arch, (3, 8, 8), 2, &mut rng).unwrap();
        // plain3: conv 3->8, conv 8->16 (s2), conv 16->16, head 16->2.
        let expect = (8 * 3 * 9 + 8) + (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16) + (16 * 2 + 2);
        assert_eq!(net.param_count(), expect);
        let model = ClassifierState {
            net,
            training: TrainConfig::default(),
            metrics: TrainMetrics::default(),
        };

        // Zero detector components: overhead counts only what exists.
        let none = parameter_count(&model, None, None);
        assert_eq!(none.detector_total, 0);
        assert_eq!(none.overhead_ratio, 0.0);

        let acfg = AugmentConfig {
            g: 2,
            ..Default::default()
        };
        let bank = init_augmentations::<f32>(12, &acfg).unwrap();
        let only_aug = parameter_count(&model, None, Some(&bank));
        assert_eq!(only_aug.augmentation_ops, 2 * 12 * 12);
        assert_eq!(only_aug.detector_total, 2 * 12 * 12);
    }

    #[test]
    fn report_roundtrips_through_json() {
        let report = EvalReport {
            schema_version: crate::SCHEMA_VERSION,
            profile: "ci".into(),
            seed: 7,
            fingerprints: Fingerprints::default(),
            clean_accuracy: 0.9,
            benign_rlt_mean: 2.01,
            auc: vec![AucEntry {
                attack: "fgsm".into(),
                measure: Measure::Rlt,
                auc: 0.97,
                n_adversarial: 120,
            }],
            robust_accuracy: vec![RaEntry {
                attack: "fgsm".into(),
                measure: Measure::Rlt,
                fpr: 0.05,
                ra: 0.8,
                flagged_fraction: 0.4,
                correct_fraction: 0.5,
            }],
            attack_stats: vec![],
            shift_profiles: vec![],
            params: ParamCountReport::default(),
            notes: vec!["n".into()],
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.auc_of("fgsm", Measure::Rlt), Some(0.97));
        assert_eq!(back.ra_of("fgsm", Measure::Rlt, 0.05), Some(0.8));
        assert_eq!(back.ra_of("fgsm", Measure::Rt, 0.05), None);
    }
}

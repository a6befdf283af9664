//! Detection metrics and reporting: ROC-AUC (Mann-Whitney with half-tie
//! credit), robust accuracy under a calibrated detector, layer-shift
//! profiles, parameter accounting, ablation grids and plot emission.

pub mod ablation;
pub mod plots;
pub mod report;
pub mod shift;

pub use ablation::{run_ablation, AblationCell, AblationReport, SweepKey, SweepSpec};
pub use report::{parameter_count, AucEntry, EvalReport, Fingerprints, ParamCountReport, RaEntry};
pub use shift::{layer_shift_profile, shift_profile_from_errors, ShiftProfile};

use crate::attacks::{AdvBatch, DetectorBundle};
use crate::error::{Error, Result};
use crate::fusion::Measure;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

/// Probability that a random adversarial score exceeds a random benign
/// score, ties counted half (the Mann-Whitney formulation, computed via
/// midranks).
pub fn roc_auc(benign: &[f64], adversarial: &[f64]) -> Result<f64> {
    if benign.is_empty() || adversarial.is_empty() {
        return Err(Error::Contract("roc_auc needs non-empty score sets".into()));
    }
    for &s in benign.iter().chain(adversarial.iter()) {
        if !s.is_finite() {
            return Err(Error::Validation(format!("non-finite score {s}")));
        }
    }
    let n_b = benign.len();
    let n_a = adversarial.len();
    let mut all: Vec<(f64, bool)> = benign
        .iter()
        .map(|&s| (s, false))
        .chain(adversarial.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Midranks over tie groups; ranks are 1-based.
    let mut rank_sum_adv = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for item in all.iter().take(j + 1).skip(i) {
            if item.1 {
                rank_sum_adv += midrank;
            }
        }
        i = j + 1;
    }
    let wins = rank_sum_adv - (n_a * (n_a + 1)) as f64 / 2.0;
    Ok(wins / (n_a as f64 * n_b as f64))
}

/// Robust accuracy of one adversarial batch at a calibrated threshold:
/// the fraction of attacked inputs that are still classified correctly OR
/// flagged by the detector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RaResult {
    pub ra: f64,
    pub flagged_fraction: f64,
    pub correct_fraction: f64,
}

pub fn robust_accuracy_at_fpr<F: Real>(
    batch: &AdvBatch<F>,
    bundle: &DetectorBundle<'_, F>,
    measure: Measure,
    fpr: f64,
) -> Result<RaResult> {
    bundle.validate()?;
    // Threshold must exist before any heavy work.
    bundle.calibration.threshold(measure, fpr)?;
    let preds = bundle.model.predict(&batch.adversarials)?;
    let (rt, lt) = bundle.scores(&batch.adversarials)?;
    let n = batch.len();
    let mut defended = 0usize;
    let mut flagged = 0usize;
    let mut correct = 0usize;
    for i in 0..n {
        let det = bundle.calibration.scores(rt[i], lt[i]);
        let flag = bundle.calibration.decide(&det, measure, fpr)?;
        let ok = preds[i] == batch.labels[i];
        if flag {
            flagged += 1;
        }
        if ok {
            correct += 1;
        }
        if ok || flag {
            defended += 1;
        }
    }
    Ok(RaResult {
        ra: defended as f64 / n as f64,
        flagged_fraction: flagged as f64 / n as f64,
        correct_fraction: correct as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    /// Brute-force pair counting: wins + half-ties over all pairs.
    fn oracle_auc(benign: &[f64], adv: &[f64]) -> f64 {
        let mut num = 0.0;
        for &a in adv {
            for &b in benign {
                if a > b {
                    num += 1.0;
                } else if a == b {
                    num += 0.5;
                }
            }
        }
        num / (benign.len() as f64 * adv.len() as f64)
    }

    #[test]
    fn hand_values() {
        assert_eq!(roc_auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        // benign {1,3}, adversarial {2,4}: wins 3 of 4 pairs.
        assert_eq!(roc_auc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
    }

    #[test]
    fn empty_input_is_contract_error() {
        assert!(roc_auc(&[], &[1.0]).is_err());
        assert!(roc_auc(&[1.0], &[]).is_err());
    }

    #[test]
    fn equals_brute_force_exactly_on_100x100() {
        let mut rng = SeedStream::new(0, "auc");
        // Quantized scores force plenty of ties.
        let benign: Vec<f64> = (0..100).map(|_| (rng.below(25) as f64) * 0.5).collect();
        let adv: Vec<f64> = (0..100)
            .map(|_| (rng.below(25) as f64) * 0.5 + 2.0)
            .collect();
        let got = roc_auc(&benign, &adv).unwrap();
        let want = oracle_auc(&benign, &adv);
        assert_eq!(got, want, "rank formulation must be exact");
    }

    #[test]
    fn antisymmetry() {
        let mut rng = SeedStream::new(1, "auc-anti");
        for _ in 0..20 {
            let a: Vec<f64> = (0..40).map(|_| rng.normal_f64()).collect();
            let b: Vec<f64> = (0..60).map(|_| rng.normal_f64() + 0.3).collect();
            let ab = roc_auc(&a, &b).unwrap();
            let ba = roc_auc(&b, &a).unwrap();
            assert!((ab + ba - 1.0).abs() < 1e-12);
        }
    }
}

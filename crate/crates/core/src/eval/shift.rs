//! Layer-shift profiles: where in the network does the reconstruction
//! error mass sit? Benign inputs give flat profiles; attacks that disturb
//! intermediate layers give sharp peaks.

use crate::error::Result;
use crate::math::softmax;
use crate::model::LayerTrace;
use crate::recovery::{calibrated_layer_errors, ErrorVector, RecoveryBank};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftProfile {
    pub population: String,
    /// Mean softmax-normalized error mass per recovered layer; sums to 1.
    pub mean_profile: Vec<f64>,
    /// Layer ids (1-based, starting at k_rt) whose mass exceeds
    /// `peak_factor / M`.
    pub peak_layers: Vec<usize>,
    /// Per-layer variance of the normalized mass across inputs.
    pub dispersion: Vec<f64>,
    /// Max entry of the mean profile; 1/M for perfectly uniform errors.
    pub flatness: f64,
    pub k_rt: usize,
    pub n: usize,
}

/// Build a profile from per-input error vectors.
pub fn shift_profile_from_errors<F: Real>(
    errors: &[ErrorVector<F>],
    population: &str,
    peak_factor: f64,
) -> ShiftProfile {
    assert!(!errors.is_empty(), "empty error population");
    let m = errors[0].e.len();
    let k_rt = errors[0].k_rt;
    let mut mean = vec![0.0f64; m];
    let mut sq = vec![0.0f64; m];
    for ev in errors {
        let sm = softmax(&ev.e);
        for (j, v) in sm.iter().enumerate() {
            let v = v.as_f64();
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let n = errors.len() as f64;
    for v in mean.iter_mut() {
        *v /= n;
    }
    let dispersion: Vec<f64> = sq
        .iter()
        .zip(mean.iter())
        .map(|(&s, &mu)| (s / n - mu * mu).max(0.0))
        .collect();
    let flatness = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = peak_factor / m as f64;
    let peak_layers: Vec<usize> = mean
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(j, _)| k_rt + j)
        .collect();
    ShiftProfile {
        population: population.to_string(),
        mean_profile: mean,
        peak_layers,
        dispersion,
        flatness,
        k_rt,
        n: errors.len(),
    }
}

/// Score two trace populations with the same bank and profile both.
pub fn layer_shift_profile<F: Real>(
    benign: &[LayerTrace<F>],
    adversarial: &[LayerTrace<F>],
    bank: &RecoveryBank<F>,
    adversarial_name: &str,
    peak_factor: f64,
) -> Result<(ShiftProfile, ShiftProfile)> {
    let be: Vec<ErrorVector<F>> = benign
        .iter()
        .map(|t| calibrated_layer_errors(t, bank))
        .collect::<Result<_>>()?;
    let ae: Vec<ErrorVector<F>> = adversarial
        .iter()
        .map(|t| calibrated_layer_errors(t, bank))
        .collect::<Result<_>>()?;
    Ok((
        shift_profile_from_errors(&be, "benign", peak_factor),
        shift_profile_from_errors(&ae, adversarial_name, peak_factor),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(e: Vec<f64>) -> ErrorVector<f64> {
        ErrorVector { e, k_rt: 1 }
    }

    #[test]
    fn profile_sums_to_one() {
        let errors = vec![
            ev(vec![0.1, 3.0, 0.2, 0.1]),
            ev(vec![1.0, 1.0, 1.0, 5.0]),
            ev(vec![0.0, 0.0, 0.0, 0.0]),
        ];
        let p = shift_profile_from_errors(&errors, "x", 2.0);
        let sum: f64 = p.mean_profile.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(p.n, 3);
    }

    #[test]
    fn uniform_errors_have_flatness_one_over_m() {
        let errors: Vec<ErrorVector<f64>> = (0..10).map(|_| ev(vec![2.5; 5])).collect();
        let p = shift_profile_from_errors(&errors, "uniform", 2.0);
        assert!((p.flatness - 0.2).abs() < 1e-12);
        assert!(p.peak_layers.is_empty());
        assert!(p.dispersion.iter().all(|&d| d < 1e-15));
    }

    #[test]
    fn peaked_errors_are_detected() {
        let errors: Vec<ErrorVector<f64>> =
            (0..10).map(|_| ev(vec![0.0, 0.0, 6.0, 0.0])).collect();
        let p = shift_profile_from_errors(&errors, "peaked", 2.0);
        assert!(p.flatness > 0.9);
        assert_eq!(p.peak_layers, vec![3]);
    }
}

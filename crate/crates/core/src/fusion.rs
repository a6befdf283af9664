//! Score fusion: benign empirical CDFs map RT and LT onto a standard normal
//! scale; the fused score is the sum of squares of the two normalized
//! values, chi-square(2)-like on benign data. Thresholds are benign
//! quantiles at the requested false-positive rates.
//!
//! Calibration and detection run in `f64` regardless of the pipeline's
//! scalar type; scores are plain scalars and the quantile math wants the
//! precision.

use crate::error::{Error, Result};
use crate::math::normal_quantile;
use serde::{Deserialize, Serialize};

/// Minimum number of benign scores accepted for calibration.
pub const MIN_CALIBRATION_SCORES: usize = 20;

/// Empirical CDF with the mid-rank plotting rule
/// `F(s) = (#{< s} + 0.5 #{== s} + 0.5) / (N + 1)`, clamped to
/// `[1/(N+1), N/(N+1)]` so the normal quantile stays finite.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmpiricalCdf {
    sorted_scores: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.len() < MIN_CALIBRATION_SCORES {
            return Err(Error::Calibration(format!(
                "{} scores provided, need at least {MIN_CALIBRATION_SCORES}",
                scores.len()
            )));
        }
        for &s in scores {
            if !s.is_finite() {
                return Err(Error::Validation(format!("non-finite score {s}")));
            }
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(EmpiricalCdf {
            sorted_scores: sorted,
        })
    }

    pub fn n(&self) -> usize {
        self.sorted_scores.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.sorted_scores
    }

    /// Evaluate the clamped plotting-rule CDF; output is always inside
    /// (0, 1).
    pub fn eval(&self, s: f64) -> f64 {
        let n = self.sorted_scores.len();
        let below = self.sorted_scores.partition_point(|&x| x < s);
        let at_or_below = self.sorted_scores.partition_point(|&x| x <= s);
        let ties = at_or_below - below;
        let raw = (below as f64 + 0.5 * ties as f64 + 0.5) / (n as f64 + 1.0);
        raw.clamp(1.0 / (n as f64 + 1.0), n as f64 / (n as f64 + 1.0))
    }
}

/// `Phi^-1(F(score))`: monotone, finite by the CDF clamping.
pub fn quantile_normalize(score: f64, cdf: &EmpiricalCdf) -> f64 {
    normal_quantile(cdf.eval(score))
}

/// The fused score: sum of squared normalized values.
pub fn rlt_score(rt_norm: f64, lt_norm: f64) -> f64 {
    rt_norm * rt_norm + lt_norm * lt_norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Rt,
    Lt,
    Rlt,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Rt, Measure::Lt, Measure::Rlt];

    pub fn name(&self) -> &'static str {
        match self {
            Measure::Rt => "rt",
            Measure::Lt => "lt",
            Measure::Rlt => "rlt",
        }
    }
}

/// Type-7 (linear interpolation) quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let p = p.clamp(0.0, 1.0);
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Thresholds per measure per false-positive rate, plus the CDFs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorCalibration {
    pub cdf_rt: EmpiricalCdf,
    pub cdf_lt: EmpiricalCdf,
    /// `(measure, fpr, tau)` rows, sorted.
    pub thresholds: Vec<(Measure, f64, f64)>,
    pub model_fingerprint: String,
    /// Benign RLT statistics on the threshold slice, for reporting.
    pub benign_rlt_mean: f64,
    pub n_cdf: usize,
    pub n_threshold: usize,
}

/// Benign scores for calibration, one entry per sample.
pub struct BenignScores {
    pub rt: Vec<f64>,
    pub lt: Vec<f64>,
}

impl DetectorCalibration {
    /// Fit CDFs on the first `split_frac` of the benign scores and
    /// thresholds on the rest. The two slices stay disjoint so realized
    /// false-positive rates are honest.
    pub fn fit(
        scores: &BenignScores,
        fpr_levels: &[f64],
        model_fingerprint: &str,
        split_frac: f64,
    ) -> Result<Self> {
        if scores.rt.len() != scores.lt.len() {
            return Err(Error::Calibration(
                "rt/lt score counts differ".into(),
            ));
        }
        let n = scores.rt.len();
        let n_cdf = ((n as f64) * split_frac) as usize;
        if n_cdf < MIN_CALIBRATION_SCORES || n - n_cdf < MIN_CALIBRATION_SCORES {
            return Err(Error::Calibration(format!(
                "{n} benign scores are too few for a {split_frac:.2} cdf/threshold split"
            )));
        }
        for f in fpr_levels {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::Config(format!("fpr level {f} outside (0,1)")));
            }
        }
        let cdf_rt = EmpiricalCdf::fit(&scores.rt[..n_cdf])?;
        let cdf_lt = EmpiricalCdf::fit(&scores.lt[..n_cdf])?;

        let thr_rt: Vec<f64> = scores.rt[n_cdf..].to_vec();
        let thr_lt: Vec<f64> = scores.lt[n_cdf..].to_vec();
        let thr_rlt: Vec<f64> = thr_rt
            .iter()
            .zip(thr_lt.iter())
            .map(|(&r, &l)| {
                rlt_score(
                    quantile_normalize(r, &cdf_rt),
                    quantile_normalize(l, &cdf_lt),
                )
            })
            .collect();
        let benign_rlt_mean = thr_rlt.iter().sum::<f64>() / thr_rlt.len() as f64;

        let mut thresholds = Vec::new();
        for (measure, pool) in [
            (Measure::Rt, &thr_rt),
            (Measure::Lt, &thr_lt),
            (Measure::Rlt, &thr_rlt),
        ] {
            let mut sorted = pool.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &fpr in fpr_levels {
                thresholds.push((measure, fpr, quantile_sorted(&sorted, 1.0 - fpr)));
            }
        }
        thresholds.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()));

        Ok(DetectorCalibration {
            cdf_rt,
            cdf_lt,
            thresholds,
            model_fingerprint: model_fingerprint.to_string(),
            benign_rlt_mean,
            n_cdf,
            n_threshold: n - n_cdf,
        })
    }

    pub fn threshold(&self, measure: Measure, fpr: f64) -> Result<f64> {
        self.thresholds
            .iter()
            .find(|(m, f, _)| *m == measure && (*f - fpr).abs() < 1e-12)
            .map(|(_, _, t)| *t)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no threshold calibrated for {} at fpr {fpr}",
                    measure.name()
                ))
            })
    }

    pub fn fpr_levels(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .thresholds
            .iter()
            .filter(|(m, _, _)| *m == Measure::Rt)
            .map(|(_, f, _)| *f)
            .collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    /// Normalize raw scores and fuse.
    pub fn scores(&self, rt: f64, lt: f64) -> DetectionScores {
        let rt_norm = quantile_normalize(rt, &self.cdf_rt);
        let lt_norm = quantile_normalize(lt, &self.cdf_lt);
        DetectionScores {
            rt,
            lt,
            rt_norm,
            lt_norm,
            rlt: rlt_score(rt_norm, lt_norm),
        }
    }

    pub fn score_of(&self, scores: &DetectionScores, measure: Measure) -> f64 {
        match measure {
            Measure::Rt => scores.rt,
            Measure::Lt => scores.lt,
            Measure::Rlt => scores.rlt,
        }
    }

    /// Strict-inequality decision: a score exactly at the threshold is not
    /// flagged.
    pub fn decide(&self, scores: &DetectionScores, measure: Measure, fpr: f64) -> Result<bool> {
        let tau = self.threshold(measure, fpr)?;
        Ok(self.score_of(scores, measure) > tau)
    }
}

/// Full per-input score breakdown.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectionScores {
    pub rt: f64,
    pub lt: f64,
    pub rt_norm: f64,
    pub lt_norm: f64,
    pub rlt: f64,
}

/// Detection outcome for one input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub flag: bool,
    pub scores: DetectionScores,
}

//! Ablation sweeps: derive one run config per grid cell (shared seed),
//! evaluate each cell with a caller-provided runner, and collect the AUC
//! grid into a single report.

use super::report::AucEntry;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKey {
    /// Recovery-head depth.
    Depth,
    /// Recovery-head hidden width.
    HiddenDim,
    /// Number of augmentation operators.
    G,
    /// k = k_rt = k_lt.
    K,
    /// Attack budget applied to every configured attack.
    Epsilon,
    /// Score-term removal: one of none, lt_decidedness, lt_entropy,
    /// lt_feature_drift, rt_inverse_entropy, rt_log_error.
    TermRemoval,
}

impl SweepKey {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(SweepKey::Depth),
            "hidden_dim" => Ok(SweepKey::HiddenDim),
            "g" => Ok(SweepKey::G),
            "k" => Ok(SweepKey::K),
            "epsilon" => Ok(SweepKey::Epsilon),
            "term_removal" => Ok(SweepKey::TermRemoval),
            other => Err(Error::Config(format!(
                "invalid sweep key {other:?}; expected one of depth, hidden_dim, g, k, epsilon, term_removal"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub key: SweepKey,
    pub values: Vec<serde_json::Value>,
}

impl SweepSpec {
    /// Derive the cell config and its label.
    pub fn apply(&self, base: &RunConfig, value: &serde_json::Value) -> Result<(RunConfig, String)> {
        let mut cfg = base.clone();
        let label = match self.key {
            SweepKey::Depth => {
                let v = as_usize(value)?;
                cfg.recovery.depth = v;
                format!("depth={v}")
            }
            SweepKey::HiddenDim => {
                let v = as_usize(value)?;
                cfg.recovery.hidden_dim = v;
                format!("hidden_dim={v}")
            }
            SweepKey::G => {
                let v = as_usize(value)?;
                cfg.probe.g = v;
                format!("g={v}")
            }
            SweepKey::K => {
                let v = as_usize(value)?;
                cfg.recovery.k_rt = v;
                cfg.probe.k_lt = v;
                format!("k={v}")
            }
            SweepKey::Epsilon => {
                let eps = value
                    .as_f64()
                    .ok_or_else(|| Error::Config(format!("epsilon value {value} not a number")))?;
                for atk in cfg.attacks.iter_mut() {
                    atk.epsilon = eps;
                    match atk.kind {
                        crate::attacks::AttackKind::Fgsm => atk.step_size = eps,
                        crate::attacks::AttackKind::Pgd | crate::attacks::AttackKind::Adaptive => {
                            atk.step_size = eps / 10.0
                        }
                        crate::attacks::AttackKind::Cw => {}
                    }
                }
                format!("epsilon={eps}")
            }
            SweepKey::TermRemoval => {
                let name = value
                    .as_str()
                    .ok_or_else(|| Error::Config(format!("term value {value} not a string")))?;
                match name {
                    "none" => {}
                    "lt_decidedness" => {
                        cfg.probe.term_flags.decidedness_softmax_vs_softmax = true
                    }
                    "lt_entropy" => cfg.probe.term_flags.drop_entropy_weight = true,
                    "lt_feature_drift" => cfg.probe.term_flags.drop_feature_drift = true,
                    "rt_inverse_entropy" => cfg.rt_term_flags.drop_inverse_entropy = true,
                    "rt_log_error" => cfg.rt_term_flags.drop_log_error = true,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown term-removal flag {other:?}"
                        )))
                    }
                }
                format!("removed={name}")
            }
        };
        Ok((cfg, label))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub auc: Vec<AucEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub key: SweepKey,
    pub seed: u64,
    pub profile: String,
    pub cells: Vec<AblationCell>,
}

/// Run every cell with the provided runner. All cells share the base seed
/// so grid differences come from the swept knob alone.
pub fn run_ablation(
    base: &RunConfig,
    sweep: &SweepSpec,
    cell_runner: impl Fn(&RunConfig) -> Result<Vec<AucEntry>>,
) -> Result<AblationReport> {
    if sweep.values.is_empty() {
        return Err(Error::Config("sweep has no values".into()));
    }
    let mut cells = Vec::with_capacity(sweep.values.len());
    for value in &sweep.values {
        let (cfg, label) = sweep.apply(base, value)?;
        let auc = cell_runner(&cfg)?;
        cells.push(AblationCell { label, auc });
    }
    Ok(AblationReport {
        schema_version: crate::SCHEMA_VERSION,
        key: sweep.key,
        seed: base.seed,
        profile: base.profile.name().to_string(),
        cells,
    })
}

fn as_usize(value: &serde_json::Value) -> Result<usize> {
    value
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::Config(format!("sweep value {value} not a non-negative integer")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, RunConfig};
    use crate::fusion::Measure;

    fn base() -> RunConfig {
        RunConfig::default_for(Profile::Ci, 7, std::path::Path::new("/tmp/x"))
    }

    #[test]
    fn sweep_keys_mutate_the_right_knob() {
        let b = base();
        let spec = SweepSpec {
            key: SweepKey::Depth,
            values: vec![2.into(), 5.into()],
        };
        let (c, label) = spec.apply(&b, &2.into()).unwrap();
        assert_eq!(c.recovery.depth, 2);
        assert_eq!(label, "depth=2");

        let spec = SweepSpec {
            key: SweepKey::K,
            values: vec![3.into()],
        };
        let (c, _) = spec.apply(&b, &3.into()).unwrap();
        assert_eq!(c.recovery.k_rt, 3);
        assert_eq!(c.probe.k_lt, 3);

        let spec = SweepSpec {
            key: SweepKey::Epsilon,
            values: vec![],
        };
        let (c, _) = spec
            .apply(&b, &serde_json::json!(0.08))
            .unwrap();
        for atk in &c.attacks {
            assert_eq!(atk.epsilon, 0.08);
        }

        let spec = SweepSpec {
            key: SweepKey::TermRemoval,
            values: vec![],
        };
        let (c, _) = spec
            .apply(&b, &serde_json::json!("rt_log_error"))
            .unwrap();
        assert!(c.rt_term_flags.drop_log_error);
    }

    #[test]
    fn invalid_key_or_value_is_config_error() {
        assert!(SweepKey::parse("nope").is_err());
        let spec = SweepSpec {
            key: SweepKey::Depth,
            values: vec![serde_json::json!("two")],
        };
        assert!(spec.apply(&base(), &serde_json::json!("two")).is_err());
        let spec = SweepSpec {
            key: SweepKey::TermRemoval,
            values: vec![],
        };
        assert!(spec.apply(&base(), &serde_json::json!("bogus")).is_err());
    }

    #[test]
    fn grid_shares_seed_and_collects_cells() {
        let b = base();
        let spec = SweepSpec {
            key: SweepKey::G,
            values: vec![1.into(), 2.into(), 3.into()],
        };
        let report = run_ablation(&b, &spec, |cfg| {
            assert_eq!(cfg.seed, 7);
            Ok(vec![AucEntry {
                attack: "fgsm".into(),
                measure: Measure::Rlt,
                auc: cfg.probe.g as f64 / 10.0,
                n_adversarial: 1,
            }])
        })
        .unwrap();
        assert_eq!(report.cells.len(), 3);
        assert_eq!(report.cells[1].label, "g=2");
        assert!((report.cells[2].auc[0].auc - 0.3).abs() < 1e-12);
    }
}

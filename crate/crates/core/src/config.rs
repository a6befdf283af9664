//! Run configuration: one declarative record driving the whole pipeline,
//! with two built-in profiles (`ci` in minutes, `desk` for the full run)
//! and JSON file overrides.

use crate::artifact::sha256_hex;
use crate::attacks::AttackConfig;
use crate::data::{DatasetSource, SyntheticSpec};
use crate::error::{Error, Result};
use crate::logit_probe::AugmentConfig;
use crate::model::TrainConfig;
use crate::recovery::{RecoveryConfig, RtTermFlags};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Smoke scale: minutes on one core.
    Ci,
    /// Full desk scale.
    Desk,
}

impl Profile {
    pub fn name(&self) -> &'static str {
        match self {
            Profile::Ci => "ci",
            Profile::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ci" => Ok(Profile::Ci),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected ci or desk"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSettings {
    pub fpr_levels: Vec<f64>,
    /// Adversarial examples generated per attack.
    pub n_eval: usize,
    /// Held-out benign inputs scored for calibration checks and AUC.
    pub n_benign_eval: usize,
    /// Peak-layer rule: mass above `peak_factor / M` marks a peak.
    pub peak_factor: f64,
    /// Examples used by the adaptive attack (it is the costly one).
    pub n_adaptive: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: TrainConfig,
    pub recovery: RecoveryConfig,
    pub probe: AugmentConfig,
    /// Cap on benign samples used to fine-tune the augmentations.
    pub probe_train_subset: usize,
    #[serde(default)]
    pub rt_term_flags: RtTermFlags,
    pub attacks: Vec<AttackConfig>,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn default_for(profile: Profile, seed: u64, out_dir: &Path) -> Self {
        let mut cfg = match profile {
            Profile::Ci => RunConfig {
                profile,
                seed,
                out_dir: out_dir.to_path_buf(),
                dataset: DatasetSource::Synthetic(SyntheticSpec {
                    n: 1200,
                    classes: 4,
                    h: 16,
                    w: 16,
                    seed,
                    channels: 3,
                    template_amp: 0.1,
                    noise_sd: 0.32,
                    split: Some((400, 500, 300)),
                }),
                model: TrainConfig {
                    architecture: "plain4".into(),
                    epochs: 8,
                    batch_size: 32,
                    lr: 2e-3,
                    weight_decay: 1e-4,
                    seed,
                    augment: false,
                },
                recovery: RecoveryConfig {
                    k_rt: 1,
                    depth: 2,
                    hidden_dim: 64,
                    epochs: 12,
                    lr: 1e-3,
                    weight_decay: 0.01,
                    batch_size: 32,
                    seed,
                    holdout_frac: 0.1,
                },
                probe: AugmentConfig {
                    g: 2,
                    k_lt: 1,
                    lambda: 0.1,
                    noise_scale: 0.01,
                    epochs: 1,
                    lr: 1e-4,
                    batch_size: 32,
                    seed,
                    holdout_frac: 0.15,
                    grad_clip: 1.0,
                    term_flags: Default::default(),
                },
                probe_train_subset: 160,
                rt_term_flags: Default::default(),
                attacks: vec![
                    AttackConfig::fgsm(0.05),
                    {
                        let mut a = AttackConfig::pgd(0.02);
                        a.steps = 10;
                        a.step_size = 0.004;
                        a
                    },
                    {
                        let mut a = AttackConfig::cw(0.1);
                        a.steps = 30;
                        a
                    },
                ],
                eval: EvalSettings {
                    fpr_levels: vec![0.05, 0.5],
                    n_eval: 150,
                    n_benign_eval: 300,
                    peak_factor: 2.0,
                    n_adaptive: 40,
                },
            },
            Profile::Desk => RunConfig {
                profile,
                seed,
                out_dir: out_dir.to_path_buf(),
                dataset: DatasetSource::Synthetic(SyntheticSpec {
                    n: 6400,
                    classes: 10,
                    h: 32,
                    w: 32,
                    seed,
                    channels: 3,
                    template_amp: 0.08,
                    noise_sd: 0.30,
                    split: Some((3000, 2400, 1000)),
                }),
                model: TrainConfig {
                    architecture: "plain8".into(),
                    epochs: 12,
                    batch_size: 64,
                    lr: 1.5e-3,
                    weight_decay: 1e-4,
                    seed,
                    augment: false,
                },
                recovery: RecoveryConfig {
                    k_rt: 1,
                    depth: 3,
                    hidden_dim: 256,
                    epochs: 50,
                    lr: 1e-4,
                    weight_decay: 0.01,
                    batch_size: 32,
                    seed,
                    holdout_frac: 0.1,
                },
                probe: AugmentConfig {
                    g: 4,
                    k_lt: 1,
                    lambda: 0.1,
                    noise_scale: 0.03,
                    epochs: 2,
                    lr: 1e-4,
                    batch_size: 32,
                    seed,
                    holdout_frac: 0.15,
                    grad_clip: 1.0,
                    term_flags: Default::default(),
                },
                probe_train_subset: 1000,
                rt_term_flags: Default::default(),
                attacks: vec![
                    AttackConfig::fgsm(0.05),
                    AttackConfig::pgd(0.02),
                    AttackConfig::cw(0.1),
                ],
                eval: EvalSettings {
                    fpr_levels: vec![0.05, 0.5],
                    n_eval: 800,
                    n_benign_eval: 1000,
                    peak_factor: 2.0,
                    n_adaptive: 120,
                },
            },
        };
        // Propagate the run seed into every stage seed.
        cfg.model.seed = seed;
        cfg.recovery.seed = seed;
        cfg.probe.seed = seed;
        for a in cfg.attacks.iter_mut() {
            a.seed = seed;
        }
        if let DatasetSource::Synthetic(s) = &mut cfg.dataset {
            s.seed = seed;
        }
        cfg
    }

    /// Load a config file (full `RunConfig` JSON).
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: RunConfig = crate::artifact::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.fpr_levels.is_empty() {
            return Err(Error::Config("no fpr levels configured".into()));
        }
        for f in &self.eval.fpr_levels {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::Config(format!("fpr level {f} outside (0,1)")));
            }
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("no attacks configured".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        if self.eval.n_eval == 0 || self.eval.n_benign_eval == 0 {
            return Err(Error::Config("evaluation sizes must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic fingerprint of the full config (out_dir excluded, so
    /// relocating a run does not change its identity).
    pub fn fingerprint(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.out_dir = PathBuf::new();
        Ok(sha256_hex(&serde_json::to_vec(&clone)?))
    }

    /// Apply CLI-style overrides.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.recovery.seed = seed;
        self.probe.seed = seed;
        for a in self.attacks.iter_mut() {
            a.seed = seed;
        }
        if let DatasetSource::Synthetic(s) = &mut self.dataset {
            s.seed = seed;
        }
        self
    }
}

#[cfg(test)]
mod dump {
#[test]
fn dump_default_configs() {
    use crate::artifact::write_json;
    use crate::config::{Profile, RunConfig};
    let ci = RunConfig::default_for(Profile::Ci, 0, std::path::Path::new("/tmp/run-ci"));
    write_json(std::path::Path::new("/tmp/base-ci.json"), &ci).unwrap();
    let desk = RunConfig::default_for(Profile::Desk, 0, std::path::Path::new("/tmp/run-desk"));
    write_json(std::path::Path::new("/tmp/base-desk.json"), &desk).unwrap();
}

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_have_sane_defaults() {
        for profile in [Profile::Ci, Profile::Desk] {
            let cfg = RunConfig::default_for(profile, 3, Path::new("/tmp/out"));
            cfg.validate().unwrap();
            assert_eq!(cfg.seed, 3);
            assert_eq!(cfg.model.seed, 3);
            assert_eq!(cfg.recovery.seed, 3);
            // Paper-scale budgets on the standard attacks.
            assert!(cfg
                .attacks
                .iter()
                .any(|a| a.kind == crate::attacks::AttackKind::Fgsm && a.epsilon == 0.05));
            assert!(cfg
                .attacks
                .iter()
                .any(|a| a.kind == crate::attacks::AttackKind::Pgd && a.epsilon == 0.02));
        }
    }

    #[test]
    fn fingerprint_ignores_out_dir_but_not_seed() {
        let a = RunConfig::default_for(Profile::Ci, 1, Path::new("/a"));
        let b = RunConfig::default_for(Profile::Ci, 1, Path::new("/b"));
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        let c = RunConfig::default_for(Profile::Ci, 2, Path::new("/a"));
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = RunConfig::default_for(Profile::Ci, 9, dir.path());
        crate::artifact::write_json(&path, &cfg).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(loaded.fingerprint().unwrap(), cfg.fingerprint().unwrap());
    }

    #[test]
    fn bad_fpr_rejected() {
        let mut cfg = RunConfig::default_for(Profile::Ci, 0, Path::new("/tmp"));
        cfg.eval.fpr_levels = vec![1.5];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

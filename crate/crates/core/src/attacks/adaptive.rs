//! Detector-aware adaptive attack: minimizes the classification loss plus
//! weighted RT and LT scores, either jointly (sign steps on the combined
//! gradient) or in the orthogonal protocol (classifier steps until fooled,
//! then detector steps projected orthogonal to the classifier gradient).
//! The cosine between the two detector gradients is logged every step.

use super::{grad_sign, project_linf, AdvBatch, AttackConfig};
use crate::error::{Error, Result};
use crate::fusion::DetectorCalibration;
use crate::logit_probe::{
    lt_backward, lt_eval_batch, AugmentationBank, LtGradTargets, LtTermFlags,
};
use crate::model::ClassifierState;
use crate::recovery::{
    layer_errors_with_caches, rt_score_grad, rt_score_with_flags, RecoveryBank, RtTermFlags,
};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// The trained detector components an adaptive adversary attacks.
pub struct DetectorBundle<'a, F> {
    pub model: &'a ClassifierState<F>,
    pub recovery: &'a RecoveryBank<F>,
    pub augment: &'a AugmentationBank<F>,
    pub calibration: &'a DetectorCalibration,
}

impl<'a, F: Real> DetectorBundle<'a, F> {
    /// All components must have been calibrated against the same
    /// classifier.
    pub fn validate(&self) -> Result<()> {
        let fp = &self.calibration.model_fingerprint;
        if self.recovery.model_fingerprint != *fp || self.augment.model_fingerprint != *fp {
            return Err(Error::Config(format!(
                "component fingerprints disagree: recovery {}, augment {}, calibration {}",
                self.recovery.model_fingerprint, self.augment.model_fingerprint, fp
            )));
        }
        let dims: Vec<usize> = self.model.layer_dims().to_vec();
        if self.recovery.layer_dims != dims {
            return Err(Error::Contract(
                "recovery bank does not match the model's layer dims".into(),
            ));
        }
        let (c, h, w) = self.model.net.input_shape;
        if self.augment.input_dim != c * h * w {
            return Err(Error::Contract(
                "augmentation bank does not match the model's input size".into(),
            ));
        }
        Ok(())
    }

    /// RT and LT scores of a batch (no gradients).
    pub fn scores(&self, x: &Tensor<F>) -> Result<(Vec<f64>, Vec<f64>)> {
        let (rt, _) = rt_batch(self.model, self.recovery, x, false)?;
        let lts = crate::logit_probe::lt_score_batch(
            x,
            self.model,
            self.augment,
            LtTermFlags::default(),
        )?;
        Ok((rt, lts.iter().map(|b| b.lt.as_f64()).collect()))
    }
}

/// RT scores for a batch, optionally with input gradients.
fn rt_batch<F: Real>(
    model: &ClassifierState<F>,
    bank: &RecoveryBank<F>,
    x: &Tensor<F>,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor<F>>)> {
    model.net.check_input(x)?;
    let cache = model.net.forward(x);
    let traces = model.net.traces(&cache);
    let b = x.len();
    let l = model.num_layers();
    let flags = RtTermFlags::default();

    let mut scores = Vec::with_capacity(b);
    let mut d_z: Vec<Option<Tensor<F>>> = (0..l).map(|_| None).collect();
    if want_grad {
        for (i, dz) in d_z.iter_mut().enumerate() {
            if i + 1 >= bank.k_rt {
                *dz = Some(Tensor::zeros(&[b, model.layer_dims()[i]]));
            }
        }
    }

    for (s, trace) in traces.iter().enumerate() {
        let (mut e, head_caches) = layer_errors_with_caches(trace, bank)?;
        crate::recovery::apply_error_scale(&mut e, bank);
        scores.push(rt_score_with_flags(&e, flags).as_f64());
        if !want_grad {
            continue;
        }
        let de = rt_score_grad(&e, flags);
        for (idx, (k, head_cache, residual)) in head_caches.iter().enumerate() {
            let dk = residual.len();
            // Through the benign-unit rescaling and the 1/D_k mean.
            let coeff =
                de[idx] * F::of(2.0 / (dk as f64 * bank.benign_error_scale[idx]));
            // Target side: d e_k / d z_k = -(2/D_k) residual.
            {
                let dzk = d_z[k - 1].as_mut().unwrap();
                let row = dzk.item_mut(s);
                for (rv, &r) in row.iter_mut().zip(residual.iter()) {
                    *rv += -(coeff * r);
                }
            }
            // Prediction side: pull (2/D_k) residual back through the head
            // into z_L.
            let dy: Vec<F> = residual.iter().map(|&r| coeff * r).collect();
            let head = &bank.heads[k];
            let dzl = head.backward_input(head_cache, &dy);
            let dz_last = d_z[l - 1].as_mut().unwrap();
            let row = dz_last.item_mut(s);
            for (rv, &v) in row.iter_mut().zip(dzl.iter()) {
                *rv += v;
            }
        }
    }

    let grad = want_grad.then(|| model.net.backward_input(&cache, &d_z, None));
    Ok((scores, grad))
}

/// Per-example adaptive outcome: did the attack fool the classifier, and is
/// the result flagged at each calibrated false-positive rate (fused
/// measure)?
#[derive(Debug, Clone)]
pub struct AdaptiveExample {
    pub fooled: bool,
    pub detected: Vec<(f64, bool)>,
}

#[derive(Debug)]
pub struct AdaptiveOutcome<F> {
    pub batch: AdvBatch<F>,
    pub per_example: Vec<AdaptiveExample>,
    /// Mean cos(grad RT, grad LT) per step (empty unless both weights
    /// are positive).
    pub step_grad_cosine: Vec<f64>,
    /// Max |cos(applied detector step, classifier gradient)| seen in
    /// orthogonal mode.
    pub max_orthogonality_violation: f64,
}

impl<F> AdaptiveOutcome<F> {
    /// Fraction of examples that fool the classifier AND evade the fused
    /// detector at the given false-positive rate.
    pub fn success_and_evasion_rate(&self, fpr: f64) -> f64 {
        if self.per_example.is_empty() {
            return 0.0;
        }
        let hits = self
            .per_example
            .iter()
            .filter(|e| {
                e.fooled
                    && e.detected
                        .iter()
                        .find(|(f, _)| (f - fpr).abs() < 1e-12)
                        .map(|(_, d)| !d)
                        .unwrap_or(false)
            })
            .count();
        hits as f64 / self.per_example.len() as f64
    }
}

/// The adaptive attack. `y` holds true labels (untargeted) or targets
/// (targeted).
pub fn orthogonal_pgd<F: Real>(
    x: &Tensor<F>,
    y: &[u32],
    bundle: &DetectorBundle<'_, F>,
    cfg: &AttackConfig,
) -> Result<AdaptiveOutcome<F>> {
    cfg.validate()?;
    bundle.validate()?;
    let model = bundle.model;
    model.net.check_input(x)?;
    let n = x.len();
    let eps = F::of(cfg.epsilon);
    let alpha = F::of(cfg.step_size);
    let dim = x.stride0();
    let use_rt = cfg.beta1 > 0.0;
    let use_lt = cfg.beta2 > 0.0;

    let mut adv = x.clone();
    let mut step_grad_cosine = Vec::with_capacity(cfg.steps);
    let mut max_violation = 0.0f64;

    for _ in 0..cfg.steps {
        // Classification gradient (of the attack loss).
        let (_, g_ce) = super::input_grad_ce(model, &adv, y)?;
        let preds = model.predict(&adv)?;

        let g_rt = if use_rt {
            rt_batch(model, bundle.recovery, &adv, true)?.1
        } else {
            None
        };
        let g_lt = if use_lt {
            let eval = lt_eval_batch(&adv, model, bundle.augment, LtTermFlags::default())?;
            lt_backward(
                model,
                bundle.augment,
                &eval,
                LtGradTargets {
                    input: true,
                    ops: false,
                },
            )
            .d_input
        } else {
            None
        };

        if let (Some(grt), Some(glt)) = (&g_rt, &g_lt) {
            let mut cos_sum = 0.0;
            let mut count = 0usize;
            for s in 0..n {
                let a = grt.item(s);
                let b = glt.item(s);
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for (&av, &bv) in a.iter().zip(b.iter()) {
                    let (af, bf) = (av.as_f64(), bv.as_f64());
                    dot += af * bf;
                    na += af * af;
                    nb += bf * bf;
                }
                if na > 0.0 && nb > 0.0 {
                    cos_sum += dot / (na.sqrt() * nb.sqrt());
                    count += 1;
                }
            }
            step_grad_cosine.push(if count > 0 {
                cos_sum / count as f64
            } else {
                f64::NAN
            });
        }

        match cfg.projection_mode {
            super::ProjectionMode::Joint => {
                // d = grad of [L_atk + b1 RT + b2 LT]; minimize.
                for s in 0..n {
                    let orig = x.item(s);
                    let gce = g_ce.item(s);
                    let a = adv.item_mut(s);
                    for j in 0..dim {
                        // Untargeted attack loss is -CE(y_true).
                        let mut d = if cfg.targeted { gce[j] } else { -gce[j] };
                        if let Some(grt) = &g_rt {
                            d += F::of(cfg.beta1) * grt.item(s)[j];
                        }
                        if let Some(glt) = &g_lt {
                            d += F::of(cfg.beta2) * glt.item(s)[j];
                        }
                        a[j] = a[j] - alpha * grad_sign(d);
                    }
                    project_linf(a, orig, eps);
                }
            }
            super::ProjectionMode::Orthogonal => {
                // Per-pixel RMS of a normalized direction is 1/sqrt(dim);
                // rescale so detector steps move pixels at the same order
                // as the sign steps of the classifier phase.
                let dir_scale = alpha * F::of((dim as f64).sqrt());
                // Flag state at the tightest calibrated threshold: samples
                // that already fool the classifier and evade detection are
                // frozen (the attacker has what it wants).
                let fprs = bundle.calibration.fpr_levels();
                let tight_fpr = fprs.first().copied().unwrap_or(0.05);
                let flagged: Vec<bool> = if use_rt || use_lt {
                    let (rt_s, lt_s) = bundle.scores(&adv)?;
                    let mut out = Vec::with_capacity(n);
                    for s in 0..n {
                        let det = bundle.calibration.scores(rt_s[s], lt_s[s]);
                        out.push(bundle.calibration.decide(
                            &det,
                            crate::fusion::Measure::Rlt,
                            tight_fpr,
                        )?);
                    }
                    out
                } else {
                    vec![true; n]
                };
                for s in 0..n {
                    let fooled = if cfg.targeted {
                        preds[s] == y[s]
                    } else {
                        preds[s] != y[s]
                    };
                    if fooled && !flagged[s] && (use_rt || use_lt) {
                        continue;
                    }
                    let gce = g_ce.item(s);
                    // Attack-loss gradient (minimization direction).
                    let g_atk: Vec<f64> = gce
                        .iter()
                        .map(|&v| {
                            if cfg.targeted {
                                v.as_f64()
                            } else {
                                -v.as_f64()
                            }
                        })
                        .collect();
                    if !fooled || (!use_rt && !use_lt) {
                        // Classifier phase: full-strength sign step.
                        let orig = x.item(s);
                        let a = adv.item_mut(s);
                        for j in 0..dim {
                            a[j] = a[j] - alpha * grad_sign(F::of(g_atk[j]));
                        }
                        project_linf(a, orig, eps);
                        continue;
                    }
                    // Detector phase: projected gradient step orthogonal to
                    // the classifier gradient, so detection scores drop
                    // without un-fooling the classifier.
                    let mut gd = vec![0.0f64; dim];
                    if let Some(grt) = &g_rt {
                        for (dv, &v) in gd.iter_mut().zip(grt.item(s)) {
                            *dv += cfg.beta1 * v.as_f64();
                        }
                    }
                    if let Some(glt) = &g_lt {
                        for (dv, &v) in gd.iter_mut().zip(glt.item(s)) {
                            *dv += cfg.beta2 * v.as_f64();
                        }
                    }
                    let atk_norm = norm(&g_atk);
                    if atk_norm > 0.0 {
                        let unit: Vec<f64> = g_atk.iter().map(|v| v / atk_norm).collect();
                        let dot: f64 = gd.iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
                        for (dv, &u) in gd.iter_mut().zip(unit.iter()) {
                            *dv -= dot * u;
                        }
                        // Record how orthogonal the applied step really is.
                        let dn = norm(&gd);
                        if dn > 0.0 {
                            let viol: f64 = gd
                                .iter()
                                .zip(unit.iter())
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                .abs()
                                / dn;
                            max_violation = max_violation.max(viol);
                        }
                    }
                    let dn = norm(&gd);
                    if dn == 0.0 {
                        continue;
                    }
                    let orig = x.item(s);
                    let a = adv.item_mut(s);
                    for j in 0..dim {
                        a[j] = a[j] - dir_scale * F::of(gd[j] / dn);
                    }
                    project_linf(a, orig, eps);
                }
            }
        }
    }

    // Final evaluation: success and detection flags.
    let preds = model.predict(&adv)?;
    let success: Vec<bool> = preds
        .iter()
        .zip(y.iter())
        .map(|(&p, &label)| {
            if cfg.targeted {
                p == label
            } else {
                p != label
            }
        })
        .collect();
    let (rt_scores, lt_scores) = bundle.scores(&adv)?;
    let fprs = bundle.calibration.fpr_levels();
    let mut per_example = Vec::with_capacity(n);
    for s in 0..n {
        let det = bundle.calibration.scores(rt_scores[s], lt_scores[s]);
        let mut detected = Vec::with_capacity(fprs.len());
        for &fpr in &fprs {
            detected.push((
                fpr,
                bundle
                    .calibration
                    .decide(&det, crate::fusion::Measure::Rlt, fpr)?,
            ));
        }
        per_example.push(AdaptiveExample {
            fooled: success[s],
            detected,
        });
    }

    let batch = AdvBatch::new(x.clone(), adv, y.to_vec(), success, cfg.clone())?;
    Ok(AdaptiveOutcome {
        batch,
        per_example,
        step_grad_cosine,
        max_orthogonality_violation: max_violation,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::pgd;
    use crate::fusion::BenignScores;
    use crate::logit_probe::init_augmentations;
    use crate::logit_probe::AugmentConfig;
    use crate::model::{
        ArchDef, BlockDef, BlockKind, ClassifierNet, TrainConfig, TrainMetrics,
    };
    use crate::recovery::{train_recovery_bank, RecoveryConfig};
    use crate::rng::SeedStream;

    fn toy_setup(
        seed: u64,
    ) -> (
        ClassifierState<f64>,
        RecoveryBank<f64>,
        AugmentationBank<f64>,
        DetectorCalibration,
    ) {
        let arch = ArchDef {
            id: "adp-toy".into(),
            blocks: vec![
                BlockDef {
                    kind: BlockKind::Conv,
                    cout: 3,
                    stride: 1,
                },
                BlockDef {
                    kind: BlockKind::Conv,
                    cout: 4,
                    stride: 1,
                },
                BlockDef {
                    kind: BlockKind::Conv,
                    cout: 4,
                    stride: 1,
                },
            ],
        };
        let mut rng = SeedStream::new(seed, "adp-model");
        let model = ClassifierState {
            net: ClassifierNet::new(&arch, (1, 3, 3), 3, &mut rng).unwrap(),
            training: TrainConfig::default(),
            metrics: TrainMetrics::default(),
        };
        // Small trained recovery bank on random benign inputs.
        let mut xrng = SeedStream::new(seed, "adp-benign");
        let mut xb = Tensor::zeros(&[48, 1, 3, 3]);
        for v in xb.data_mut() {
            *v = xrng.uniform_f64();
        }
        let traces = model.forward_trace(&xb).unwrap();
        let rcfg = RecoveryConfig {
            depth: 1,
            hidden_dim: 8,
            epochs: 10,
            lr: 1e-3,
            ..Default::default()
        };
        let mut recovery = train_recovery_bank(&traces, &rcfg).unwrap();
        let acfg = AugmentConfig {
            g: 2,
            ..Default::default()
        };
        let mut augment = init_augmentations::<f64>(9, &acfg).unwrap();

        // Calibration on benign scores.
        let bundle_scores = |m: &ClassifierState<f64>,
                             r: &RecoveryBank<f64>,
                             a: &AugmentationBank<f64>|
         -> BenignScores {
            let mut rt = Vec::new();
            let mut lt = Vec::new();
            let mut srng = SeedStream::new(seed, "adp-cal");
            let mut xc = Tensor::zeros(&[120, 1, 3, 3]);
            for v in xc.data_mut() {
                *v = srng.uniform_f64();
            }
            let traces = m.forward_trace(&xc).unwrap();
            for (i, t) in traces.iter().enumerate() {
                let e = crate::recovery::layer_errors(t, r).unwrap();
                rt.push(crate::recovery::rt_score(&e).as_f64());
                let idx = vec![i];
                let xi = xc.gather(&idx);
                let bd = crate::logit_probe::lt_score_batch(
                    &xi,
                    m,
                    a,
                    LtTermFlags::default(),
                )
                .unwrap();
                lt.push(bd[0].lt);
            }
            BenignScores { rt, lt }
        };
        let scores = bundle_scores(&model, &recovery, &augment);
        let calibration =
            DetectorCalibration::fit(&scores, &[0.05, 0.5], "toy-fp", 0.7).unwrap();
        recovery.model_fingerprint = "toy-fp".into();
        augment.model_fingerprint = "toy-fp".into();
        (model, recovery, augment, calibration)
    }

    fn random_x(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeedStream::new(seed, "adp-x");
        let mut t = Tensor::zeros(&[n, 1, 3, 3]);
        for v in t.data_mut() {
            *v = rng.uniform_f64();
        }
        t
    }

    #[test]
    fn rt_input_gradient_matches_finite_differences() {
        let (model, recovery, _, _) = toy_setup(1);
        let x = random_x(2, 3);
        let (scores, grad) = rt_batch(&model, &recovery, &x, true).unwrap();
        let grad = grad.unwrap();
        assert_eq!(scores.len(), 2);
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let (sp, _) = rt_batch(&model, &recovery, &xp, false).unwrap();
            let (sm, _) = rt_batch(&model, &recovery, &xm, false).unwrap();
            let s = i / x.stride0();
            let fd = (sp[s] - sm[s]) / (2.0 * h);
            let got = grad.data()[i].as_f64();
            assert!(
                (got - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "pixel {i}: {got} vs {fd}"
            );
        }
    }

    #[test]
    fn zero_weights_joint_mode_reduces_to_pgd_bitwise() {
        let (model, recovery, augment, calibration) = toy_setup(5);
        let bundle = DetectorBundle {
            model: &model,
            recovery: &recovery,
            augment: &augment,
            calibration: &calibration,
        };
        let x = random_x(4, 9);
        let y = vec![0u32, 1, 2, 0];
        let mut cfg = AttackConfig::adaptive(0.06);
        cfg.beta1 = 0.0;
        cfg.beta2 = 0.0;
        cfg.steps = 5;
        cfg.step_size = 0.012;
        let out = orthogonal_pgd(&x, &y, &bundle, &cfg).unwrap();

        let mut pgd_cfg = AttackConfig::pgd(0.06);
        pgd_cfg.steps = 5;
        pgd_cfg.step_size = 0.012;
        let reference = pgd(&model, &x, &y, &pgd_cfg).unwrap();
        for (a, b) in out
            .batch
            .adversarials
            .data()
            .iter()
            .zip(reference.adversarials.data().iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // No cosine log without both detector terms.
        assert!(out.step_grad_cosine.is_empty());
    }

    #[test]
    fn orthogonal_mode_steps_are_orthogonal_to_classifier_gradient() {
        let (model, recovery, augment, calibration) = toy_setup(7);
        let bundle = DetectorBundle {
            model: &model,
            recovery: &recovery,
            augment: &augment,
            calibration: &calibration,
        };
        let x = random_x(6, 11);
        // Use labels equal to current predictions' complement so several
        // examples start "fooled" and detector steps kick in immediately.
        let preds = model.predict(&x).unwrap();
        let y: Vec<u32> = preds.iter().map(|&p| (p + 1) % 3).collect();
        let mut cfg = AttackConfig::adaptive(0.08);
        cfg.projection_mode = crate::attacks::ProjectionMode::Orthogonal;
        cfg.steps = 6;
        cfg.step_size = 0.01;
        let out = orthogonal_pgd(&x, &y, &bundle, &cfg).unwrap();
        assert!(
            out.max_orthogonality_violation <= 1e-6,
            "violation {}",
            out.max_orthogonality_violation
        );
        assert_eq!(out.step_grad_cosine.len(), 6);
        // Budget soundness.
        for &d in &out.batch.linf {
            assert!(d <= cfg.epsilon + 1e-9);
        }
        // Detection flags computed for both calibrated fprs.
        for ex in &out.per_example {
            assert_eq!(ex.detected.len(), 2);
        }
    }

    #[test]
    fn mismatched_fingerprints_rejected() {
        let (model, mut recovery, augment, calibration) = toy_setup(13);
        recovery.model_fingerprint = "other".into();
        let bundle = DetectorBundle {
            model: &model,
            recovery: &recovery,
            augment: &augment,
            calibration: &calibration,
        };
        let x = random_x(1, 2);
        let cfg = AttackConfig::adaptive(0.05);
        assert!(matches!(
            orthogonal_pgd(&x, &[0], &bundle, &cfg),
            Err(Error::Config(_))
        ));
    }
}

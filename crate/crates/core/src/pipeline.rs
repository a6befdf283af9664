//! End-to-end orchestration: calibrate, attack, evaluate,
//! validate-assumption and ablate. Every command exists both as an
//! in-memory function (used by tests and the ablation runner) and as a
//! persisted `cmd_*` flavor writing fingerprinted artifacts plus a run
//! manifest. Wall-clock timings go to a `timings.json` sidecar that is
//! excluded from the manifest, keeping re-runs bit-identical.

use crate::artifact::{
    classifier_fingerprint, file_fingerprint, load_augmentations, load_classifier,
    load_recovery, read_json, save_augmentations, save_classifier, save_recovery, write_json,
    RunManifest,
};
use crate::attacks::{
    cw, fgsm, orthogonal_pgd, pgd, AdaptiveOutcome, AdvBatch, AttackConfig, AttackKind,
    DetectorBundle,
};
use crate::config::RunConfig;
use crate::data::{load_dataset, DatasetSplit, LoadedDataset};
use crate::error::{Error, Result};
use crate::eval::plots::{write_line_svg, write_series_csv, Series};
use crate::eval::{
    layer_shift_profile, parameter_count, robust_accuracy_at_fpr, roc_auc, run_ablation,
    AblationReport, AucEntry, EvalReport, Fingerprints, RaEntry, ShiftProfile, SweepSpec,
};
use crate::fusion::{BenignScores, Detection, DetectorCalibration, Measure};
use crate::logit_probe::{
    init_augmentations, lt_score_batch, train_augmentations, AugmentationBank,
};
use crate::model::{train_classifier, ClassifierState, LayerTrace};
use crate::recovery::{
    calibrated_layer_errors, rt_score_with_flags, train_recovery_bank, RecoveryBank,
};
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

type S = crate::DefaultScalar;

/// Scoring / tracing chunk size; bounds forward-cache memory.
const CHUNK: usize = 64;

/// Override root for artifact output directories.
pub const ARTIFACT_ROOT_ENV: &str = "LAYERSHIFT_ARTIFACT_ROOT";

/// Resolve the effective output directory for a config.
pub fn effective_out_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(ARTIFACT_ROOT_ENV) {
        Some(root) if !root.is_empty() => {
            let base = PathBuf::from(root);
            match cfg.out_dir.file_name() {
                Some(name) => base.join(name),
                None => base,
            }
        }
        _ => cfg.out_dir.clone(),
    }
}

/// Everything the detector needs at test time.
pub struct Artifacts {
    pub model: ClassifierState<S>,
    pub model_fp: String,
    pub recovery: RecoveryBank<S>,
    pub augment: AugmentationBank<S>,
    pub calibration: DetectorCalibration,
}

impl Artifacts {
    pub fn bundle(&self) -> DetectorBundle<'_, S> {
        DetectorBundle {
            model: &self.model,
            recovery: &self.recovery,
            augment: &self.augment,
            calibration: &self.calibration,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

fn stats(scores: &[f64]) -> ScoreStats {
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n.max(1) as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n.max(1) as f64;
    ScoreStats {
        mean,
        sd: var.sqrt(),
        n,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub profile: String,
    pub seed: u64,
    pub clean_accuracy: f64,
    pub recovery_init_holdout_loss: f64,
    pub recovery_final_holdout_loss: f64,
    pub augment_init_holdout_lt: f64,
    pub augment_final_holdout_lt: f64,
    pub benign_rt: ScoreStats,
    pub benign_lt: ScoreStats,
    /// Mean fused score over held-out benign inputs (test split).
    pub heldout_benign_rlt_mean: f64,
    pub heldout_benign_n: usize,
    pub model_fingerprint: String,
    pub config_fingerprint: String,
}

/// RT and LT scores over a batch of images, chunked.
pub fn detector_scores(
    cfg: &RunConfig,
    model: &ClassifierState<S>,
    recovery: &RecoveryBank<S>,
    augment: &AugmentationBank<S>,
    images: &Tensor<S>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = images.len();
    let mut rt = Vec::with_capacity(n);
    let mut lt = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = images.gather(&idx);
        let traces = model.forward_trace(&x)?;
        for t in &traces {
            let e = calibrated_layer_errors(t, recovery)?;
            rt.push(rt_score_with_flags(&e, cfg.rt_term_flags).as_f64());
        }
        for bd in lt_score_batch(&x, model, augment, cfg.probe.term_flags)? {
            lt.push(bd.lt.as_f64());
        }
        start = end;
    }
    Ok((rt, lt))
}

/// Traces of a batch, chunked.
fn traces_chunked(model: &ClassifierState<S>, images: &Tensor<S>) -> Result<Vec<LayerTrace<S>>> {
    let n = images.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        out.extend(model.forward_trace(&images.gather(&idx))?);
        start = end;
    }
    Ok(out)
}

/// Train and calibrate every detector component. Deterministic given the
/// config.
pub fn calibrate_in_memory(
    cfg: &RunConfig,
) -> Result<(Artifacts, LoadedDataset<S>, CalibrationSummary)> {
    cfg.validate()?;
    let ds: LoadedDataset<S> = load_dataset(&cfg.dataset)?;

    let model = train_classifier(&ds.train, Some(&ds.test), &cfg.model)?;
    let model_fp = classifier_fingerprint(&model)?;

    // Calibration pool: first half trains the detector modules, the rest
    // feeds CDF fitting and thresholds (split again inside fit()).
    let n_calib = ds.calibration.n();
    let n_fit = n_calib / 2;
    if n_fit < 8 {
        return Err(Error::Config(format!(
            "calibration split of {n_calib} samples is too small"
        )));
    }
    let module_split = ds.calibration.take(n_fit);
    let score_idx: Vec<usize> = (n_fit..n_calib).collect();
    let score_split = ds.calibration.select(&score_idx);

    let traces = traces_chunked(&model, &module_split.images)?;
    let mut recovery = train_recovery_bank(&traces, &cfg.recovery)?;
    recovery.model_fingerprint = model_fp.clone();

    let (c, h, w) = model.net.input_shape;
    let init_bank = init_augmentations::<S>(c * h * w, &cfg.probe)?;
    let aug_pool = module_split
        .images
        .gather(&(0..cfg.probe_train_subset.min(module_split.n())).collect::<Vec<_>>());
    let mut augment = train_augmentations(&aug_pool, &model, &init_bank, &cfg.probe)?;
    augment.model_fingerprint = model_fp.clone();

    let (benign_rt, benign_lt) =
        detector_scores(cfg, &model, &recovery, &augment, &score_split.images)?;
    let calibration = DetectorCalibration::fit(
        &BenignScores {
            rt: benign_rt.clone(),
            lt: benign_lt.clone(),
        },
        &cfg.eval.fpr_levels,
        &model_fp,
        0.7,
    )?;

    // Held-out benign fused-score check on the test split.
    let n_held = cfg.eval.n_benign_eval.min(ds.test.n());
    let held = ds.test.take(n_held);
    let (held_rt, held_lt) = detector_scores(cfg, &model, &recovery, &augment, &held.images)?;
    let rlt_mean = held_rt
        .iter()
        .zip(held_lt.iter())
        .map(|(&r, &l)| calibration.scores(r, l).rlt)
        .sum::<f64>()
        / n_held.max(1) as f64;

    let summary = CalibrationSummary {
        profile: cfg.profile.name().into(),
        seed: cfg.seed,
        clean_accuracy: model.metrics.clean_test_accuracy.unwrap_or(0.0),
        recovery_init_holdout_loss: recovery.meta.init_holdout_loss,
        recovery_final_holdout_loss: recovery.meta.final_holdout_loss,
        augment_init_holdout_lt: augment.meta.init_holdout_lt,
        augment_final_holdout_lt: augment.meta.final_holdout_lt,
        benign_rt: stats(&benign_rt),
        benign_lt: stats(&benign_lt),
        heldout_benign_rlt_mean: rlt_mean,
        heldout_benign_n: n_held,
        model_fingerprint: model_fp.clone(),
        config_fingerprint: cfg.fingerprint()?,
    };

    Ok((
        Artifacts {
            model,
            model_fp,
            recovery,
            augment,
            calibration,
        },
        ds,
        summary,
    ))
}

/// Calibrate and persist all artifacts under the run directory.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<(Artifacts, CalibrationSummary, RunManifest)> {
    let t0 = Instant::now();
    let out = effective_out_dir(cfg);
    std::fs::create_dir_all(&out)?;
    let (artifacts, _ds, summary) = calibrate_in_memory(cfg)?;

    let mut manifest = RunManifest::new(&summary.config_fingerprint);
    // The persisted config is relocatable: out_dir is implied by location.
    let mut cfg_to_save = cfg.clone();
    cfg_to_save.out_dir = PathBuf::from(".");
    let h = write_json(&out.join("config.json"), &cfg_to_save)?;
    manifest.push("config", "config.json", "run_config", h);

    let h = save_classifier(&artifacts.model, &out.join("model.lsct"))?;
    manifest.push("model", "model.lsct", "classifier", h);
    let h = save_recovery(&artifacts.recovery, &out.join("recovery.lsct"))?;
    manifest.push("recovery", "recovery.lsct", "recovery_bank", h);
    let h = save_augmentations(&artifacts.augment, &out.join("augment.lsct"))?;
    manifest.push("augment", "augment.lsct", "augmentation_bank", h);
    let h = write_json(&out.join("calibration.json"), &artifacts.calibration)?;
    manifest.push("calibration", "calibration.json", "detector_calibration", h);
    let h = write_json(&out.join("calibrate_summary.json"), &summary)?;
    manifest.push("summary", "calibrate_summary.json", "summary", h);
    manifest.write(&out.join("manifest.json"))?;

    write_timings(&out, "calibrate", t0.elapsed().as_secs_f64())?;
    Ok((artifacts, summary, manifest))
}

/// Load persisted artifacts for a run directory.
pub fn load_artifacts(cfg: &RunConfig) -> Result<Artifacts> {
    let out = effective_out_dir(cfg);
    let model_path = out.join("model.lsct");
    if !model_path.is_file() {
        return Err(Error::Config(format!(
            "no calibrated artifacts at {} (run calibrate first)",
            out.display()
        )));
    }
    let (model, model_fp) = load_classifier::<S>(&model_path)?;
    let recovery = load_recovery::<S>(&out.join("recovery.lsct"))?;
    let augment = load_augmentations::<S>(&out.join("augment.lsct"))?;
    let calibration: DetectorCalibration = read_json(&out.join("calibration.json"))?;
    Ok(Artifacts {
        model,
        model_fp,
        recovery,
        augment,
        calibration,
    })
}

/// Batch detection with the full score breakdown (the thresholded decision
/// per input at one measure / fpr).
pub fn detect(
    artifacts: &Artifacts,
    x: &Tensor<S>,
    measure: Measure,
    fpr: f64,
    cfg: &RunConfig,
) -> Result<Vec<Detection>> {
    let bundle = artifacts.bundle();
    bundle.validate()?;
    let (rt, lt) = detector_scores(
        cfg,
        &artifacts.model,
        &artifacts.recovery,
        &artifacts.augment,
        x,
    )?;
    let mut out = Vec::with_capacity(rt.len());
    for (&r, &l) in rt.iter().zip(lt.iter()) {
        let scores = artifacts.calibration.scores(r, l);
        out.push(Detection {
            flag: artifacts.calibration.decide(&scores, measure, fpr)?,
            scores,
        });
    }
    Ok(out)
}

/// The evaluation pool: first `n_eval` test inputs.
fn attack_pool(cfg: &RunConfig, ds: &LoadedDataset<S>) -> DatasetSplit<S> {
    ds.test.take(cfg.eval.n_eval.min(ds.test.n()))
}

/// Generate one adversarial batch (standard attacks).
pub fn attack_in_memory(
    cfg: &RunConfig,
    artifacts: &Artifacts,
    ds: &LoadedDataset<S>,
    attack: &AttackConfig,
) -> Result<AdvBatch<S>> {
    let pool = attack_pool(cfg, ds);
    match attack.kind {
        AttackKind::Fgsm => fgsm(&artifacts.model, &pool.images, &pool.labels, attack.epsilon),
        AttackKind::Pgd => pgd(&artifacts.model, &pool.images, &pool.labels, attack),
        AttackKind::Cw => cw(&artifacts.model, &pool.images, &pool.labels, attack),
        AttackKind::Adaptive => Err(Error::Config(
            "adaptive attacks go through adaptive_in_memory".into(),
        )),
    }
}

/// Generate the adaptive batch (needs the calibrated detector).
pub fn adaptive_in_memory(
    cfg: &RunConfig,
    artifacts: &Artifacts,
    ds: &LoadedDataset<S>,
    attack: &AttackConfig,
) -> Result<AdaptiveOutcome<S>> {
    let pool = ds.test.take(cfg.eval.n_adaptive.min(ds.test.n()));
    let bundle = artifacts.bundle();
    orthogonal_pgd(&pool.images, &pool.labels, &bundle, attack)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSidecar {
    pub attack: String,
    pub epsilon: f64,
    pub n: usize,
    pub success_rate: f64,
    pub success_rate_among_correct: f64,
    pub mean_linf: f64,
    /// Adaptive only: mean cos(grad RT, grad LT) per step.
    pub step_grad_cosine: Option<Vec<f64>>,
    pub max_orthogonality_violation: Option<f64>,
}

/// Generate and persist batches for the requested kinds (default: all
/// configured attacks).
pub fn cmd_attack(
    cfg: &RunConfig,
    kinds: Option<&[AttackKind]>,
) -> Result<Vec<(AttackKind, PathBuf)>> {
    let t0 = Instant::now();
    let out = effective_out_dir(cfg);
    let attacks_dir = out.join("attacks");
    std::fs::create_dir_all(&attacks_dir)?;
    let artifacts = load_artifacts(cfg)?;
    let ds: LoadedDataset<S> = load_dataset(&cfg.dataset)?;

    let selected: Vec<AttackConfig> = cfg
        .attacks
        .iter()
        .filter(|a| kinds.map_or(true, |ks| ks.contains(&a.kind)))
        .cloned()
        .collect();
    if selected.is_empty() {
        return Err(Error::Config("no matching attacks configured".into()));
    }

    let clean_preds = artifacts.model.predict(&attack_pool(cfg, &ds).images)?;
    let mut outputs = Vec::new();
    for attack in &selected {
        let name = attack.kind.name();
        let path = attacks_dir.join(format!("{name}.lsct"));
        let sidecar_path = attacks_dir.join(format!("{name}.stats.json"));
        let (batch, cosine, violation) = match attack.kind {
            AttackKind::Adaptive => {
                let outcome = adaptive_in_memory(cfg, &artifacts, &ds, attack)?;
                (
                    outcome.batch,
                    Some(outcome.step_grad_cosine),
                    Some(outcome.max_orthogonality_violation),
                )
            }
            _ => (attack_in_memory(cfg, &artifacts, &ds, attack)?, None, None),
        };
        batch.save(&path)?;
        let sidecar = AttackSidecar {
            attack: name.into(),
            epsilon: attack.epsilon,
            n: batch.len(),
            success_rate: batch.success_rate(),
            success_rate_among_correct: if attack.kind == AttackKind::Adaptive {
                batch.success_rate()
            } else {
                batch.success_rate_among_correct(&clean_preds)
            },
            mean_linf: batch.linf.iter().sum::<f64>() / batch.len().max(1) as f64,
            step_grad_cosine: cosine,
            max_orthogonality_violation: violation,
        };
        write_json(&sidecar_path, &sidecar)?;
        outputs.push((attack.kind, path));
    }
    write_timings(&out, "attack", t0.elapsed().as_secs_f64())?;
    Ok(outputs)
}

/// Evaluate one set of adversarial batches against the detector.
pub fn evaluate_in_memory(
    cfg: &RunConfig,
    artifacts: &Artifacts,
    ds: &LoadedDataset<S>,
    batches: &[(String, AdvBatch<S>)],
) -> Result<EvalReport> {
    if batches.is_empty() {
        return Err(Error::Config("no adversarial batches to evaluate".into()));
    }
    let bundle = artifacts.bundle();
    bundle.validate()?;

    let n_benign = cfg.eval.n_benign_eval.min(ds.test.n());
    let benign = ds.test.take(n_benign);
    let (benign_rt, benign_lt) = detector_scores(
        cfg,
        &artifacts.model,
        &artifacts.recovery,
        &artifacts.augment,
        &benign.images,
    )?;
    let benign_rlt: Vec<f64> = benign_rt
        .iter()
        .zip(benign_lt.iter())
        .map(|(&r, &l)| artifacts.calibration.scores(r, l).rlt)
        .collect();
    let benign_rlt_mean = benign_rlt.iter().sum::<f64>() / benign_rlt.len().max(1) as f64;
    let benign_traces = traces_chunked(&artifacts.model, &benign.images)?;

    let mut auc_entries = Vec::new();
    let mut ra_entries = Vec::new();
    let mut attack_stats = Vec::new();
    let mut shift_profiles: Vec<ShiftProfile> = Vec::new();
    let mut notes = vec![
        "detector trained on benign data only: seen/unseen attack columns coincide".to_string(),
    ];

    for (name, batch) in batches {
        // Score the successful adversarials (the detection population);
        // fall back to the whole batch when the attack never succeeds.
        let success_idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.success[i]).collect();
        let scored_idx = if success_idx.is_empty() {
            notes.push(format!(
                "attack {name}: no successful examples; scored the full batch"
            ));
            (0..batch.len()).collect()
        } else {
            success_idx
        };
        let adv_images = batch.adversarials.gather(&scored_idx);
        let (adv_rt, adv_lt) = detector_scores(
            cfg,
            &artifacts.model,
            &artifacts.recovery,
            &artifacts.augment,
            &adv_images,
        )?;
        let adv_rlt: Vec<f64> = adv_rt
            .iter()
            .zip(adv_lt.iter())
            .map(|(&r, &l)| artifacts.calibration.scores(r, l).rlt)
            .collect();

        for (measure, benign_scores, adv_scores) in [
            (Measure::Rt, &benign_rt, &adv_rt),
            (Measure::Lt, &benign_lt, &adv_lt),
            (Measure::Rlt, &benign_rlt, &adv_rlt),
        ] {
            auc_entries.push(AucEntry {
                attack: name.clone(),
                measure,
                auc: roc_auc(benign_scores, adv_scores)?,
                n_adversarial: adv_scores.len(),
            });
        }

        for &fpr in &cfg.eval.fpr_levels {
            for measure in Measure::ALL {
                let ra = robust_accuracy_at_fpr(batch, &bundle, measure, fpr)?;
                ra_entries.push(RaEntry {
                    attack: name.clone(),
                    measure,
                    fpr,
                    ra: ra.ra,
                    flagged_fraction: ra.flagged_fraction,
                    correct_fraction: ra.correct_fraction,
                });
            }
        }

        let adv_traces = traces_chunked(&artifacts.model, &adv_images)?;
        let (benign_profile, adv_profile) = layer_shift_profile(
            &benign_traces,
            &adv_traces,
            &artifacts.recovery,
            name,
            cfg.eval.peak_factor,
        )?;
        if shift_profiles.is_empty() {
            shift_profiles.push(benign_profile);
        }
        shift_profiles.push(adv_profile);

        attack_stats.push(crate::eval::report::AttackStats {
            attack: name.clone(),
            epsilon: batch.config.epsilon,
            n: batch.len(),
            success_rate: batch.success_rate(),
            success_rate_among_correct: batch.success_rate(),
            mean_linf: batch.linf.iter().sum::<f64>() / batch.len().max(1) as f64,
        });
    }

    Ok(EvalReport {
        schema_version: crate::SCHEMA_VERSION,
        profile: cfg.profile.name().into(),
        seed: cfg.seed,
        fingerprints: Fingerprints {
            model: artifacts.model_fp.clone(),
            recovery: artifacts.recovery.model_fingerprint.clone(),
            augment: artifacts.augment.model_fingerprint.clone(),
            calibration: artifacts.calibration.model_fingerprint.clone(),
            config: cfg.fingerprint()?,
        },
        clean_accuracy: artifacts.model.metrics.clean_test_accuracy.unwrap_or(0.0),
        benign_rlt_mean,
        auc: auc_entries,
        robust_accuracy: ra_entries,
        attack_stats,
        shift_profiles,
        params: parameter_count(
            &artifacts.model,
            Some(&artifacts.recovery),
            Some(&artifacts.augment),
        ),
        notes,
    })
}

/// Load batches from explicit paths or from the run's attacks directory.
pub fn load_batches(
    cfg: &RunConfig,
    adv_paths: Option<&[PathBuf]>,
) -> Result<Vec<(String, AdvBatch<S>)>> {
    let mut out = Vec::new();
    match adv_paths {
        Some(paths) => {
            for p in paths {
                let batch = AdvBatch::<S>::load(p)?;
                let name = batch.config.kind.name().to_string();
                out.push((name, batch));
            }
        }
        None => {
            let dir = effective_out_dir(cfg).join("attacks");
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "no adversarial batches at {} (run attack first)",
                    dir.display()
                )));
            }
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().map(|e| e == "lsct").unwrap_or(false))
                .collect();
            paths.sort();
            for p in paths {
                let batch = AdvBatch::<S>::load(&p)?;
                let name = batch.config.kind.name().to_string();
                out.push((name, batch));
            }
        }
    }
    Ok(out)
}

/// Evaluate persisted batches and write the report plus figures.
pub fn cmd_evaluate(cfg: &RunConfig, adv_paths: Option<&[PathBuf]>) -> Result<EvalReport> {
    let t0 = Instant::now();
    let out = effective_out_dir(cfg);
    let artifacts = load_artifacts(cfg)?;
    let ds: LoadedDataset<S> = load_dataset(&cfg.dataset)?;
    let batches = load_batches(cfg, adv_paths)?;
    let report = evaluate_in_memory(cfg, &artifacts, &ds, &batches)?;

    let eval_dir = out.join("eval");
    std::fs::create_dir_all(eval_dir.join("figures"))?;
    let mut manifest = RunManifest::new(&report.fingerprints.config);
    let h = write_json(&eval_dir.join("report.json"), &report)?;
    manifest.push("report", "report.json", "eval_report", h);

    // Shift-profile figure: benign + every attack over recovered layers.
    let series: Vec<Series> = report
        .shift_profiles
        .iter()
        .map(|p| {
            Series::new(
                &p.population,
                p.mean_profile
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| ((p.k_rt + i) as f64, v))
                    .collect(),
            )
        })
        .collect();
    let fig = eval_dir.join("figures/shift_profiles.svg");
    write_line_svg(
        &fig,
        "layer-wise error mass",
        "layer",
        "mean softmax error mass",
        &series,
    )?;
    manifest.push(
        "shift_profiles_svg",
        "figures/shift_profiles.svg",
        "figure",
        file_fingerprint(&fig)?,
    );
    let csv = eval_dir.join("figures/shift_profiles.csv");
    write_series_csv(&csv, &series)?;
    manifest.push(
        "shift_profiles_csv",
        "figures/shift_profiles.csv",
        "series",
        file_fingerprint(&csv)?,
    );

    // AUC summary per attack/measure.
    let mut auc_series: Vec<Series> = Vec::new();
    for measure in Measure::ALL {
        let points: Vec<(f64, f64)> = report
            .auc
            .iter()
            .filter(|e| e.measure == measure)
            .enumerate()
            .map(|(i, e)| (i as f64, e.auc))
            .collect();
        auc_series.push(Series::new(measure.name(), points));
    }
    let fig = eval_dir.join("figures/auc_by_attack.svg");
    write_line_svg(&fig, "detection AUC", "attack index", "AUC", &auc_series)?;
    manifest.push(
        "auc_svg",
        "figures/auc_by_attack.svg",
        "figure",
        file_fingerprint(&fig)?,
    );
    let csv = eval_dir.join("figures/auc_by_attack.csv");
    write_series_csv(&csv, &auc_series)?;
    manifest.push(
        "auc_csv",
        "figures/auc_by_attack.csv",
        "series",
        file_fingerprint(&csv)?,
    );

    manifest.write(&eval_dir.join("manifest.json"))?;
    write_timings(&out, "evaluate", t0.elapsed().as_secs_f64())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub schema_version: u32,
    pub seed: u64,
    pub profiles: Vec<ShiftProfile>,
    /// (population, flatness) rows.
    pub flatness: Vec<(String, f64)>,
    pub benign_flatness: f64,
    /// LT vs RT AUC for each attack, for the logit-layer narrative.
    pub auc_comparison: Vec<(String, f64, f64)>,
}

/// Empirical check of the layer-shift pattern: flat benign profiles vs
/// peaked attack profiles, plus the LT/RT AUC split per attack.
pub fn validate_assumption_in_memory(
    cfg: &RunConfig,
    artifacts: &Artifacts,
    ds: &LoadedDataset<S>,
    batches: &[(String, AdvBatch<S>)],
) -> Result<AssumptionReport> {
    let report = evaluate_in_memory(cfg, artifacts, ds, batches)?;
    let benign_flatness = report
        .shift_profiles
        .iter()
        .find(|p| p.population == "benign")
        .map(|p| p.flatness)
        .ok_or_else(|| Error::Contract("missing benign profile".into()))?;
    let flatness: Vec<(String, f64)> = report
        .shift_profiles
        .iter()
        .map(|p| (p.population.clone(), p.flatness))
        .collect();
    let mut auc_comparison = Vec::new();
    for (name, _) in batches {
        let lt = report.auc_of(name, Measure::Lt).unwrap_or(f64::NAN);
        let rt = report.auc_of(name, Measure::Rt).unwrap_or(f64::NAN);
        auc_comparison.push((name.clone(), lt, rt));
    }
    Ok(AssumptionReport {
        schema_version: crate::SCHEMA_VERSION,
        seed: cfg.seed,
        profiles: report.shift_profiles,
        flatness,
        benign_flatness,
        auc_comparison,
    })
}

pub fn cmd_validate_assumption(
    cfg: &RunConfig,
    adv_paths: Option<&[PathBuf]>,
) -> Result<AssumptionReport> {
    let t0 = Instant::now();
    let out = effective_out_dir(cfg);
    let artifacts = load_artifacts(cfg)?;
    let ds: LoadedDataset<S> = load_dataset(&cfg.dataset)?;
    let batches = load_batches(cfg, adv_paths)?;
    let report = validate_assumption_in_memory(cfg, &artifacts, &ds, &batches)?;
    let dir = out.join("assumption");
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("assumption_report.json"), &report)?;
    let series: Vec<Series> = report
        .profiles
        .iter()
        .map(|p| {
            Series::new(
                &p.population,
                p.mean_profile
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| ((p.k_rt + i) as f64, v))
                    .collect(),
            )
        })
        .collect();
    write_line_svg(
        &dir.join("shift_profiles.svg"),
        "layer-wise error mass by population",
        "layer",
        "mean softmax error mass",
        &series,
    )?;
    write_series_csv(&dir.join("shift_profiles.csv"), &series)?;
    write_timings(&out, "validate-assumption", t0.elapsed().as_secs_f64())?;
    Ok(report)
}

/// One ablation cell: calibrate, attack and evaluate in memory, returning
/// the AUC entries.
pub fn ablation_cell(cfg: &RunConfig) -> Result<Vec<AucEntry>> {
    let (artifacts, ds, _) = calibrate_in_memory(cfg)?;
    let mut batches = Vec::new();
    for attack in &cfg.attacks {
        if attack.kind == AttackKind::Adaptive {
            continue;
        }
        let batch = attack_in_memory(cfg, &artifacts, &ds, attack)?;
        batches.push((attack.kind.name().to_string(), batch));
    }
    let report = evaluate_in_memory(cfg, &artifacts, &ds, &batches)?;
    Ok(report.auc)
}

pub fn cmd_ablate(cfg: &RunConfig, sweep: &SweepSpec) -> Result<AblationReport> {
    let t0 = Instant::now();
    let out = effective_out_dir(cfg);
    std::fs::create_dir_all(&out)?;
    let report = run_ablation(cfg, sweep, ablation_cell)?;
    write_json(&out.join("ablation_report.json"), &report)?;

    // AUC-vs-cell series per measure, averaged over attacks.
    let mut series = Vec::new();
    for measure in Measure::ALL {
        let points: Vec<(f64, f64)> = report
            .cells
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                let entries: Vec<f64> = cell
                    .auc
                    .iter()
                    .filter(|e| e.measure == measure)
                    .map(|e| e.auc)
                    .collect();
                (
                    i as f64,
                    entries.iter().sum::<f64>() / entries.len().max(1) as f64,
                )
            })
            .collect();
        series.push(Series::new(measure.name(), points));
    }
    write_line_svg(
        &out.join("ablation_auc.svg"),
        "ablation sweep",
        "cell index",
        "mean AUC",
        &series,
    )?;
    write_series_csv(&out.join("ablation_auc.csv"), &series)?;
    write_timings(&out, "ablate", t0.elapsed().as_secs_f64())?;
    Ok(report)
}

/// Volatile timing sidecar; never part of the manifest.
fn write_timings(out: &Path, stage: &str, seconds: f64) -> Result<()> {
    let path = out.join("timings.json");
    let mut timings: BTreeMap<String, f64> = if path.is_file() {
        read_json(&path).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    timings.insert(stage.to_string(), seconds);
    write_json(&path, &timings)?;
    Ok(())
}

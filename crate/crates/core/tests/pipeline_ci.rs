//! End-to-end pipeline checks at the ci profile: calibrate, attack,
//! evaluate, ablate, determinism and the external-batch ingestion path.
//! One shared calibration fixture keeps the suite fast.

use layershift_core::attacks::{fgsm, AttackKind};
use layershift_core::config::{Profile, RunConfig};
use layershift_core::data::{load_dataset, LoadedDataset};
use layershift_core::error::Error;
use layershift_core::eval::plots::svg_looks_valid;
use layershift_core::eval::{SweepKey, SweepSpec};
use layershift_core::fusion::Measure;
use layershift_core::pipeline::{
    self, ablation_cell, adaptive_in_memory, attack_in_memory, calibrate_in_memory,
    evaluate_in_memory, Artifacts, CalibrationSummary,
};
use std::path::Path;
use std::sync::OnceLock;

type Fixture = (
    RunConfig,
    Artifacts,
    LoadedDataset<f32>,
    CalibrationSummary,
);

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let cfg = RunConfig::default_for(Profile::Ci, 0, Path::new("/unused"));
        let (artifacts, ds, summary) = calibrate_in_memory(&cfg).expect("ci calibration");
        (cfg, artifacts, ds, summary)
    })
}

#[test]
fn ci_calibration_summary_is_sane() {
    let (cfg, _, _, summary) = fixture();
    // Smoke-scale contract: fused benign score near its chi-square mean.
    assert!(
        summary.heldout_benign_rlt_mean >= 1.5 && summary.heldout_benign_rlt_mean <= 2.5,
        "E[RLT] {}",
        summary.heldout_benign_rlt_mean
    );
    assert!(summary.clean_accuracy >= 0.60, "{}", summary.clean_accuracy);
    assert!(summary.recovery_final_holdout_loss <= summary.recovery_init_holdout_loss);
    assert!(summary.augment_final_holdout_lt <= summary.augment_init_holdout_lt + 1e-9);
    assert_eq!(summary.config_fingerprint, cfg.fingerprint().unwrap());
}

#[test]
fn ci_report_is_complete_and_consistent() {
    let (cfg, artifacts, ds, _) = fixture();
    let mut batches = Vec::new();
    for attack in &cfg.attacks {
        let b = attack_in_memory(cfg, artifacts, ds, attack).unwrap();
        batches.push((attack.kind.name().to_string(), b));
    }
    let report = evaluate_in_memory(cfg, artifacts, ds, &batches).unwrap();

    // Every attack carries all three measures.
    for (name, _) in &batches {
        for measure in Measure::ALL {
            assert!(
                report.auc_of(name, measure).is_some(),
                "missing AUC for {name}/{measure:?}"
            );
            for &fpr in &cfg.eval.fpr_levels {
                assert!(
                    report.ra_of(name, measure, fpr).is_some(),
                    "missing RA for {name}/{measure:?}@{fpr}"
                );
            }
        }
        // RA monotone in the threshold.
        let ra5 = report.ra_of(name, Measure::Rlt, 0.05).unwrap();
        let ra50 = report.ra_of(name, Measure::Rlt, 0.5).unwrap();
        assert!(
            ra50 >= ra5 - 1e-12,
            "{name}: RA@50 {ra50} < RA@5 {ra5}"
        );
    }
    // Benign profile present and each profile sums to 1.
    assert!(report.shift_profiles.iter().any(|p| p.population == "benign"));
    for p in &report.shift_profiles {
        let sum: f64 = p.mean_profile.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "{} sums to {sum}", p.population);
    }
    // Parameter accounting is self-consistent.
    assert_eq!(
        report.params.detector_total,
        report.params.recovery_heads + report.params.augmentation_ops
    );
    assert!(report.params.classifier > 0);
}

#[test]
fn multi_step_pgd_dominates_single_step_at_equal_budget() {
    let (cfg, artifacts, ds, _) = fixture();
    let pool = ds.test.take(cfg.eval.n_eval.min(ds.test.n()));
    let eps = 0.02;
    let single = fgsm(&artifacts.model, &pool.images, &pool.labels, eps).unwrap();
    let mut pgd_cfg = layershift_core::attacks::AttackConfig::pgd(eps);
    pgd_cfg.steps = 10;
    pgd_cfg.step_size = eps / 5.0;
    let multi =
        layershift_core::attacks::pgd(&artifacts.model, &pool.images, &pool.labels, &pgd_cfg)
            .unwrap();
    assert!(
        multi.success_rate() >= single.success_rate(),
        "pgd {} < single-step {}",
        multi.success_rate(),
        single.success_rate()
    );
}

#[test]
fn benign_flag_rate_matches_fpr_level() {
    let (cfg, artifacts, ds, _) = fixture();
    // Fresh benign inputs, disjoint from the calibration scores.
    let n = 200.min(ds.test.n());
    let x = ds.test.take(n);
    let detections = pipeline::detect(artifacts, &x.images, Measure::Rlt, 0.5, cfg).unwrap();
    let rate = detections.iter().filter(|d| d.flag).count() as f64 / n as f64;
    let band = 2.0 / (n as f64).sqrt();
    assert!(
        (rate - 0.5).abs() <= band + 0.05,
        "benign flag rate {rate} at fpr 0.5"
    );
    // Purity: identical inputs give identical detections.
    let again = pipeline::detect(artifacts, &x.images, Measure::Rlt, 0.5, cfg).unwrap();
    for (a, b) in detections.iter().zip(again.iter()) {
        assert_eq!(a.flag, b.flag);
        assert_eq!(a.scores.rlt.to_bits(), b.scores.rlt.to_bits());
    }
}

#[test]
fn external_batch_ingestion_roundtrips() {
    let (cfg, artifacts, ds, _) = fixture();
    let attack = &cfg.attacks[0];
    let batch = attack_in_memory(cfg, artifacts, ds, attack).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("external.lsct");
    batch.save(&path).unwrap();

    // A well-formed external archive evaluates without regeneration.
    let loaded = layershift_core::attacks::AdvBatch::<f32>::load(&path).unwrap();
    let direct = evaluate_in_memory(
        cfg,
        artifacts,
        ds,
        &[("fgsm".to_string(), batch)],
    )
    .unwrap();
    let via_file = evaluate_in_memory(
        cfg,
        artifacts,
        ds,
        &[("fgsm".to_string(), loaded)],
    )
    .unwrap();
    for measure in Measure::ALL {
        assert_eq!(
            direct.auc_of("fgsm", measure),
            via_file.auc_of("fgsm", measure)
        );
    }
}

#[test]
fn adaptive_attack_runs_and_logs_gradient_conflict() {
    let (cfg, artifacts, ds, _) = fixture();
    let mut acfg = layershift_core::attacks::AttackConfig::adaptive(8.0 / 255.0);
    acfg.steps = 6;
    acfg.projection_mode = layershift_core::attacks::ProjectionMode::Orthogonal;
    let mut cfg2 = cfg.clone();
    cfg2.eval.n_adaptive = 24;
    let outcome = adaptive_in_memory(&cfg2, artifacts, ds, &acfg).unwrap();
    assert_eq!(outcome.step_grad_cosine.len(), 6);
    assert!(outcome.max_orthogonality_violation <= 1e-6);
    assert_eq!(outcome.per_example.len(), 24);
    for c in &outcome.step_grad_cosine {
        assert!(c.is_finite());
        assert!(*c >= -1.0 - 1e-9 && *c <= 1.0 + 1e-9);
    }
}

#[test]
fn single_cell_sweep_equals_direct_evaluation() {
    let (cfg, _, _, _) = fixture();
    let mut small = cfg.clone();
    // Shrink so the cell (which retrains everything) stays quick.
    small.eval.n_eval = 60;
    small.attacks.truncate(1);
    let spec = SweepSpec {
        key: SweepKey::G,
        values: vec![serde_json::json!(small.probe.g)],
    };
    let report = layershift_core::eval::run_ablation(&small, &spec, ablation_cell).unwrap();
    assert_eq!(report.cells.len(), 1);
    let direct = ablation_cell(&small).unwrap();
    assert_eq!(report.cells[0].auc.len(), direct.len());
    for (a, b) in report.cells[0].auc.iter().zip(direct.iter()) {
        assert_eq!(a.auc.to_bits(), b.auc.to_bits(), "cell differs from direct run");
    }
}

#[test]
fn persisted_runs_are_bit_identical() {
    let (cfg, _, _, _) = fixture();
    let mut quick = cfg.clone();
    quick.eval.n_eval = 50;
    quick.eval.n_benign_eval = 120;
    quick.attacks.truncate(2);

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut cfg_a = quick.clone();
    cfg_a.out_dir = dir_a.path().to_path_buf();
    let mut cfg_b = quick.clone();
    cfg_b.out_dir = dir_b.path().to_path_buf();

    let (_, _, manifest_a) = pipeline::cmd_calibrate(&cfg_a).unwrap();
    let (_, _, manifest_b) = pipeline::cmd_calibrate(&cfg_b).unwrap();
    assert_eq!(
        manifest_a.combined_hash().unwrap(),
        manifest_b.combined_hash().unwrap(),
        "calibration artifacts differ between identical runs"
    );

    pipeline::cmd_attack(&cfg_a, None).unwrap();
    pipeline::cmd_attack(&cfg_b, None).unwrap();
    pipeline::cmd_evaluate(&cfg_a, None).unwrap();
    pipeline::cmd_evaluate(&cfg_b, None).unwrap();
    let report_a = std::fs::read(dir_a.path().join("eval/report.json")).unwrap();
    let report_b = std::fs::read(dir_b.path().join("eval/report.json")).unwrap();
    assert_eq!(report_a, report_b, "evaluation reports differ");

    // Figures parse as valid SVG with matching CSV series.
    let svg = std::fs::read(dir_a.path().join("eval/figures/shift_profiles.svg")).unwrap();
    assert!(svg_looks_valid(&svg));
    let csv =
        std::fs::read_to_string(dir_a.path().join("eval/figures/shift_profiles.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("x,"));

    // Evaluate before attack in a fresh dir is a config error.
    let dir_c = tempfile::tempdir().unwrap();
    let mut cfg_c = quick.clone();
    cfg_c.out_dir = dir_c.path().to_path_buf();
    match pipeline::cmd_evaluate(&cfg_c, None) {
        Err(Error::Config(msg)) => assert!(msg.contains("calibrate")),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn adaptive_without_artifacts_is_config_error() {
    let (cfg, _, _, _) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut fresh = cfg.clone();
    fresh.out_dir = dir.path().to_path_buf();
    fresh.attacks = vec![layershift_core::attacks::AttackConfig::adaptive(0.03)];
    match pipeline::cmd_attack(&fresh, Some(&[AttackKind::Adaptive])) {
        Err(Error::Config(_)) => {}
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn synthetic_dataset_regenerates_identically_for_attack_stage() {
    // The attack/evaluate stages reload the dataset from config; the test
    // split must come back bit-identical.
    let (cfg, _, ds, _) = fixture();
    let again: LoadedDataset<f32> = load_dataset(&cfg.dataset).unwrap();
    assert_eq!(ds.test.images.data(), again.test.images.data());
    assert_eq!(ds.test.labels, again.test.labels);
}

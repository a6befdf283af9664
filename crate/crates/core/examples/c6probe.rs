// scratch: criterion-6 direction probe on saved artifacts
use layershift_core::attacks::{orthogonal_pgd, AttackConfig, ProjectionMode};
use layershift_core::config::RunConfig;
use layershift_core::data::load_dataset;
use layershift_core::pipeline::load_artifacts;

fn main() {
    let cfg = RunConfig::from_file(std::path::Path::new("/tmp/d3cfg-D.json")).unwrap();
    let artifacts = load_artifacts(&cfg).unwrap();
    let ds = load_dataset::<f32>(&cfg.dataset).unwrap();
    let pool = ds.test.take(120);
    let bundle = artifacts.bundle();
    let mode: ProjectionMode = match std::env::args().nth(1).as_deref() {
        Some("joint") => ProjectionMode::Joint,
        _ => ProjectionMode::Orthogonal,
    };
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let eps: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(8.0 / 255.0);
    for (b1, b2, name) in [(1.0, 1.0, "dual"), (1.0, 0.0, "rt-only"), (0.0, 1.0, "lt-only")] {
        let mut acfg = AttackConfig::adaptive(eps);
        acfg.projection_mode = mode;
        acfg.steps = steps;
        acfg.step_size = acfg.epsilon / 10.0;
        acfg.beta1 = b1;
        acfg.beta2 = b2;
        let t = std::time::Instant::now();
        let out = orthogonal_pgd(&pool.images, &pool.labels, &bundle, &acfg).unwrap();
        let fooled = out.per_example.iter().filter(|e| e.fooled).count();
        println!(
            "{name}: fooled {}/{} evade@5% {:.3} evade@50% {:.3} mean_cos {:.3} [{:.0}s]",
            fooled,
            out.per_example.len(),
            out.success_and_evasion_rate(0.05),
            out.success_and_evasion_rate(0.5),
            out.step_grad_cosine.iter().sum::<f64>() / out.step_grad_cosine.len().max(1) as f64,
            t.elapsed().as_secs_f64()
        );
    }
}

//! Single-step and iterated sign-gradient attacks under an L-infinity
//! budget.

use super::{grad_sign, project_linf, AdvBatch, AttackConfig};
use crate::error::Result;
use crate::model::{ce_loss_and_grad, ClassifierState};
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Per-sample cross-entropy losses and input gradients (unscaled; each
/// sample's gradient is of its own loss).
pub fn input_grad_ce<F: Real>(
    model: &ClassifierState<F>,
    x: &Tensor<F>,
    y: &[u32],
) -> Result<(Vec<F>, Tensor<F>)> {
    model.net.check_input(x)?;
    let cache = model.net.forward(x);
    let (losses, dl) = ce_loss_and_grad(&cache.logits, y);
    let d_z: Vec<Option<Tensor<F>>> = (0..model.num_layers()).map(|_| None).collect();
    let dx = model.net.backward_input(&cache, &d_z, Some(&dl));
    Ok((losses, dx))
}

/// Iterated ascent on the classification loss with per-step projection onto
/// the epsilon ball and the pixel range.
pub fn pgd<F: Real>(
    model: &ClassifierState<F>,
    x: &Tensor<F>,
    y: &[u32],
    cfg: &AttackConfig,
) -> Result<AdvBatch<F>> {
    cfg.validate()?;
    model.net.check_input(x)?;
    let eps = F::of(cfg.epsilon);
    let alpha = F::of(cfg.step_size);
    let n = x.len();

    let mut adv = x.clone();
    if cfg.random_start {
        let mut rng = SeedStream::new(cfg.seed, "pgd-random-start");
        for i in 0..n {
            let orig = x.item(i);
            let a = adv.item_mut(i);
            for (av, &ov) in a.iter_mut().zip(orig.iter()) {
                *av = ov + rng.uniform(-eps, eps);
            }
            project_linf(a, orig, eps);
        }
    }

    for _ in 0..cfg.steps {
        let (_, grads) = input_grad_ce(model, &adv, y)?;
        for i in 0..n {
            let orig = x.item(i);
            let g = grads.item(i);
            let a = adv.item_mut(i);
            for (av, &gv) in a.iter_mut().zip(g.iter()) {
                *av = *av + alpha * grad_sign(gv);
            }
            project_linf(a, orig, eps);
        }
    }

    let preds = model.predict(&adv)?;
    let success: Vec<bool> = preds
        .iter()
        .zip(y.iter())
        .map(|(&p, &label)| p != label)
        .collect();
    AdvBatch::new(x.clone(), adv, y.to_vec(), success, cfg.clone())
}

/// One sign-gradient step at full budget: `clip(x + eps * sign(grad))`.
pub fn fgsm<F: Real>(
    model: &ClassifierState<F>,
    x: &Tensor<F>,
    y: &[u32],
    epsilon: f64,
) -> Result<AdvBatch<F>> {
    pgd(model, x, y, &AttackConfig::fgsm(epsilon))
}

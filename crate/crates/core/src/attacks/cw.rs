//! Carlini-Wagner style L2 attack, reparameterized in tanh space over the
//! intersection of the epsilon box and the pixel range, so every iterate
//! satisfies both constraints by construction. Fixed trade-off constant, no
//! binary search; the best (lowest-distortion) successful iterate wins.

use super::{AdvBatch, AttackConfig};
use crate::error::Result;
use crate::math::argmax;
use crate::model::ClassifierState;
use crate::nn::{AdamW, Param};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub fn cw<F: Real>(
    model: &ClassifierState<F>,
    x: &Tensor<F>,
    y: &[u32],
    cfg: &AttackConfig,
) -> Result<AdvBatch<F>> {
    cfg.validate()?;
    model.net.check_input(x)?;
    let n = x.len();
    let dim = x.stride0();
    let eps = cfg.epsilon;
    let kappa = F::of(cfg.cw_kappa);
    let c_const = F::of(cfg.cw_c);

    // Per-pixel box: [max(0, x-eps), min(1, x+eps)].
    let mut mid = vec![F::zero(); n * dim];
    let mut half = vec![F::zero(); n * dim];
    for (i, &xi) in x.data().iter().enumerate() {
        let lo = (xi.as_f64() - eps).max(0.0);
        let hi = (xi.as_f64() + eps).min(1.0);
        mid[i] = F::of(0.5 * (lo + hi));
        half[i] = F::of(0.5 * (hi - lo));
    }

    // w such that mid + half*tanh(w) ~= x.
    let atanh = |v: f64| 0.5 * ((1.0 + v) / (1.0 - v)).ln();
    let mut w = Param::new(
        (0..n * dim)
            .map(|i| {
                let h = half[i].as_f64();
                if h < 1e-12 {
                    F::zero()
                } else {
                    let r = ((x.data()[i].as_f64() - mid[i].as_f64()) / h).clamp(-0.999999, 0.999999);
                    F::of(atanh(r))
                }
            })
            .collect(),
    );
    let mut opt = AdamW::new(cfg.step_size, 0.0);

    let decode = |w: &[F]| -> Tensor<F> {
        let mut out = Tensor::zeros(x.shape());
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = mid[i] + half[i] * w[i].tanh();
        }
        out
    };

    // Track the best successful adversarial per example (min L2), seeded
    // with the undisturbed input so already-misclassified inputs come back
    // unchanged and successful.
    let mut best_adv = x.clone();
    let mut best_l2 = vec![f64::INFINITY; n];
    let mut best_success = vec![false; n];
    {
        let preds = model.predict(x)?;
        for i in 0..n {
            if preds[i] != y[i] {
                best_success[i] = true;
                best_l2[i] = 0.0;
            }
        }
    }

    for _ in 0..cfg.steps {
        let adv = decode(&w.value);
        let cache = model.net.forward(&adv);
        // Margin loss and logit cotangent per sample.
        let mut dl = Tensor::zeros(&[n, model.num_classes()]);
        for s in 0..n {
            let logits = cache.logits.item(s);
            let yi = y[s] as usize;
            let pred = argmax(logits);
            let l2: f64 = adv
                .item(s)
                .iter()
                .zip(x.item(s).iter())
                .map(|(&a, &o)| {
                    let d = a.as_f64() - o.as_f64();
                    d * d
                })
                .sum();
            if pred != y[s] as usize {
                let l2r = l2.sqrt();
                if l2r < best_l2[s] {
                    best_l2[s] = l2r;
                    best_success[s] = true;
                    best_adv.item_mut(s).copy_from_slice(adv.item(s));
                }
            }
            // margin = Z_y - max_{j != y} Z_j, hinged at -kappa.
            let mut j_star = usize::MAX;
            for j in 0..logits.len() {
                if j != yi && (j_star == usize::MAX || logits[j] > logits[j_star]) {
                    j_star = j;
                }
            }
            let margin = logits[yi] - logits[j_star];
            if margin > -kappa {
                let row = dl.item_mut(s);
                row[yi] += c_const;
                row[j_star] -= c_const;
            }
        }
        let d_z: Vec<Option<Tensor<F>>> = (0..model.num_layers()).map(|_| None).collect();
        let mut d_adv = model.net.backward_input(&cache, &d_z, Some(&dl));
        // Distance term: d ||adv - x||^2 = 2 (adv - x).
        for (i, g) in d_adv.data_mut().iter_mut().enumerate() {
            *g += F::of(2.0) * (adv.data()[i] - x.data()[i]);
        }
        // Through the tanh reparameterization.
        for i in 0..n * dim {
            let t = w.value[i].tanh();
            w.grad[i] = d_adv.data()[i] * half[i] * (F::one() - t * t);
        }
        opt.tick();
        opt.step_param(&mut w);
    }

    // Last iterate for examples that never succeeded.
    let last = decode(&w.value);
    for s in 0..n {
        if !best_success[s] {
            best_adv.item_mut(s).copy_from_slice(last.item(s));
        }
    }

    AdvBatch::new(x.clone(), best_adv, y.to_vec(), best_success, cfg.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::fgsm;
    use crate::data::{load_dataset, DatasetSource, SyntheticSpec};
    use crate::model::{train_classifier, TrainConfig};

    fn trained_toy() -> (crate::model::ClassifierState<f32>, crate::data::LoadedDataset<f32>) {
        let ds = load_dataset::<f32>(&DatasetSource::Synthetic(SyntheticSpec {
            n: 300,
            classes: 3,
            h: 8,
            w: 8,
            seed: 4,
            channels: 3,
            template_amp: 0.2,
            noise_sd: 0.28,
            split: Some((200, 50, 50)),
        }))
        .unwrap();
        let cfg = TrainConfig {
            architecture: "plain3".into(),
            epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
            augment: false,
        };
        let model = train_classifier(&ds.train, Some(&ds.test), &cfg).unwrap();
        (model, ds)
    }

    #[test]
    fn already_misclassified_inputs_return_unchanged_with_success() {
        let (model, ds) = trained_toy();
        // Find misclassified test inputs; mislabel a correct one if needed.
        let preds = model.predict(&ds.test.images).unwrap();
        let mut labels = ds.test.labels.clone();
        let victim = 0usize;
        if preds[victim] == labels[victim] {
            labels[victim] = (labels[victim] + 1) % 3;
        }
        let idx: Vec<usize> = vec![victim];
        let x = ds.test.images.gather(&idx);
        let y = vec![labels[victim]];
        let batch = cw(&model, &x, &y, &AttackConfig::cw(0.1)).unwrap();
        assert!(batch.success[0]);
        assert_eq!(batch.adversarials.data(), x.data());
        assert_eq!(batch.linf[0], 0.0);
    }

    #[test]
    fn cw_l2_distortion_below_fgsm_at_matched_success() {
        let (model, ds) = trained_toy();
        let preds = model.predict(&ds.test.images).unwrap();
        let correct: Vec<usize> = (0..ds.test.n())
            .filter(|&i| preds[i] == ds.test.labels[i])
            .take(16)
            .collect();
        assert!(correct.len() >= 8, "toy model too weak for the test");
        let x = ds.test.images.gather(&correct);
        let y: Vec<u32> = correct.iter().map(|&i| ds.test.labels[i]).collect();

        let eps = 0.1;
        let fg = fgsm(&model, &x, &y, eps).unwrap();
        let mut cw_cfg = AttackConfig::cw(eps);
        cw_cfg.steps = 120;
        let cwb = cw(&model, &x, &y, &cw_cfg).unwrap();

        let l2 = |batch: &AdvBatch<f32>, i: usize| -> f64 {
            batch
                .adversarials
                .item(i)
                .iter()
                .zip(batch.originals.item(i).iter())
                .map(|(&a, &o)| {
                    let d = (a - o) as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        // Compare mean L2 over the jointly successful examples.
        let mut cw_sum = 0.0;
        let mut fg_sum = 0.0;
        let mut count = 0;
        for i in 0..x.len() {
            if cwb.success[i] && fg.success[i] {
                cw_sum += l2(&cwb, i);
                fg_sum += l2(&fg, i);
                count += 1;
            }
        }
        assert!(count >= 3, "need joint successes, got {count}");
        assert!(
            cw_sum < fg_sum,
            "CW mean L2 {cw_sum} not below FGSM {fg_sum} over {count} examples"
        );
        // Budget still sound.
        for &d in &cwb.linf {
            assert!(d <= eps + 1e-6);
        }
    }
}

//! Logit probing: a handful of learnable linear input augmentations expose
//! inputs whose logits are disproportionately unstable relative to their
//! feature drift.
//!
//! For each operator `W` the probe compares the original input against
//! `clip(Wx)`: feature drift is the per-dimension mean squared distance of
//! the pooled embeddings from layer `k_lt` up, logit decidedness is the
//! squared distance between the predicted one-hot and the augmented softmax.
//! Their log ratio, weighted by the prediction entropy of the original
//! input, averages into the LT score. Operators are fine-tuned on benign
//! data with the score itself as the loss plus an identity-deviation
//! penalty.

use crate::error::{Error, Result};
use crate::math::{one_hot, shannon_entropy, softmax, softmax_entropy_grad, squared_distance};
use crate::model::{ClassifierState, ForwardCache};
use crate::nn::{clip_global_norm, AdamW, Param};
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Floor inside both logarithms of the score.
pub const LT_EPS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    /// Number of operators (1..=6).
    pub g: usize,
    /// First layer included in the feature-drift sum (1-based).
    pub k_lt: usize,
    /// Identity-deviation penalty weight.
    pub lambda: f64,
    /// Init perturbation scale around the identity.
    pub noise_scale: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub holdout_frac: f64,
    /// Global gradient-norm clip across all operators.
    pub grad_clip: f64,
    #[serde(default)]
    pub term_flags: LtTermFlags,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            g: 4,
            k_lt: 1,
            lambda: 0.1,
            noise_scale: 0.01,
            epochs: 2,
            lr: 1e-4,
            batch_size: 32,
            seed: 0,
            holdout_frac: 0.15,
            grad_clip: 1.0,
            term_flags: LtTermFlags::default(),
        }
    }
}

/// Term-removal switches for the score ablation.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct LtTermFlags {
    /// Drop the prediction-entropy weight.
    #[serde(default)]
    pub drop_entropy_weight: bool,
    /// Measure decidedness as softmax-vs-softmax distance instead of
    /// one-hot-vs-softmax.
    #[serde(default)]
    pub decidedness_softmax_vs_softmax: bool,
    /// Drop the feature-drift denominator.
    #[serde(default)]
    pub drop_feature_drift: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AugmentTrainMeta {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Mean held-out LT before / after training (after = best epoch).
    pub init_holdout_lt: f64,
    pub final_holdout_lt: f64,
    pub best_epoch: Option<usize>,
    pub loss_curve: Vec<f64>,
}

/// G learnable dense operators on the flattened input image.
#[derive(Debug, Clone)]
pub struct AugmentationBank<F> {
    /// Row-major `input_dim x input_dim` matrices.
    pub ops: Vec<Vec<F>>,
    pub input_dim: usize,
    pub g: usize,
    pub k_lt: usize,
    pub lambda: f64,
    pub meta: AugmentTrainMeta,
    pub model_fingerprint: String,
}

impl<F: Real> AugmentationBank<F> {
    pub fn param_count(&self) -> usize {
        self.ops.iter().map(|o| o.len()).sum()
    }

    /// Frobenius distance of operator `g` from the identity.
    pub fn identity_distance(&self, g: usize) -> f64 {
        let d = self.input_dim;
        let mut sq = 0.0;
        for i in 0..d {
            for j in 0..d {
                let idv = if i == j { 1.0 } else { 0.0 };
                let diff = self.ops[g][i * d + j].as_f64() - idv;
                sq += diff * diff;
            }
        }
        sq.sqrt()
    }
}

/// Per-operator score terms.
#[derive(Debug, Clone, PartialEq)]
pub struct AugTerm<F> {
    pub delta_z: F,
    pub delta_l: F,
    pub s: F,
}

/// Full score breakdown for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LtBreakdown<F> {
    pub per_aug: Vec<AugTerm<F>>,
    pub entropy_weight: F,
    pub lt: F,
}

/// `W = I + N(0, noise^2)` per entry, seeded.
pub fn init_augmentations<F: Real>(
    input_dim: usize,
    cfg: &AugmentConfig,
) -> Result<AugmentationBank<F>> {
    if cfg.g < 1 || cfg.g > 6 {
        return Err(Error::Config(format!(
            "augmentation count G = {} outside [1, 6]",
            cfg.g
        )));
    }
    if cfg.k_lt < 1 {
        return Err(Error::Config("k_lt must be >= 1".into()));
    }
    let mut ops = Vec::with_capacity(cfg.g);
    for gi in 0..cfg.g {
        let mut rng = SeedStream::new(cfg.seed, &format!("augment-init-{gi}"));
        let mut w = vec![F::zero(); input_dim * input_dim];
        if cfg.noise_scale != 0.0 {
            rng.fill_normal(&mut w, F::of(cfg.noise_scale));
        }
        for i in 0..input_dim {
            w[i * input_dim + i] += F::one();
        }
        ops.push(w);
    }
    Ok(AugmentationBank {
        ops,
        input_dim,
        g: cfg.g,
        k_lt: cfg.k_lt,
        lambda: cfg.lambda,
        meta: AugmentTrainMeta {
            epochs: 0,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            lambda: cfg.lambda,
            ..Default::default()
        },
        model_fingerprint: String::new(),
    })
}

/// One augmented branch of a batch evaluation.
pub struct AugBranch<F> {
    /// Pre-clip `x W^T`, kept for the clip mask.
    pub pre: Tensor<F>,
    pub cache: ForwardCache<F>,
}

/// Everything computed while scoring a batch; feeds the backward pass.
pub struct LtBatchEval<F> {
    pub breakdowns: Vec<LtBreakdown<F>>,
    pub cache_orig: ForwardCache<F>,
    pub branches: Vec<AugBranch<F>>,
    pub flags: LtTermFlags,
}

/// Apply operator to a flattened batch: returns (pre-clip, clipped).
fn apply_op<F: Real>(x: &Tensor<F>, op: &[F], dim: usize) -> (Tensor<F>, Tensor<F>) {
    let b = x.len();
    let mut pre = Tensor::zeros(x.shape());
    F::gemm(
        b,
        dim,
        dim,
        F::one(),
        x.data(),
        dim as isize,
        1,
        op,
        1,
        dim as isize,
        F::zero(),
        pre.data_mut(),
        dim as isize,
        1,
    );
    let mut clipped = pre.clone();
    for v in clipped.data_mut() {
        *v = v.max(F::zero()).min(F::one());
    }
    (pre, clipped)
}

/// Score a batch, keeping every forward cache (for gradients).
pub fn lt_eval_batch<F: Real>(
    x: &Tensor<F>,
    model: &ClassifierState<F>,
    bank: &AugmentationBank<F>,
    flags: LtTermFlags,
) -> Result<LtBatchEval<F>> {
    model.net.check_input(x)?;
    let dim: usize = x.stride0();
    if dim != bank.input_dim {
        return Err(Error::Contract(format!(
            "bank input dim {} does not match image dim {dim}",
            bank.input_dim
        )));
    }
    let l = model.num_layers();
    if bank.k_lt > l {
        return Err(Error::Contract(format!(
            "k_lt = {} exceeds layer count {l}",
            bank.k_lt
        )));
    }
    let b = x.len();
    let cache_orig = model.net.forward(x);

    let mut branches = Vec::with_capacity(bank.ops.len());
    for op in &bank.ops {
        let (pre, clipped) = apply_op(x, op, dim);
        let cache = model.net.forward(&clipped);
        branches.push(AugBranch { pre, cache });
    }

    let eps = F::of(LT_EPS_FLOOR);
    let layer_weight = F::of_usize(l - bank.k_lt + 1).recip();
    let mut breakdowns = Vec::with_capacity(b);
    for s in 0..b {
        let logits = cache_orig.logits.item(s);
        let probs = softmax(logits);
        let y_hat = crate::math::argmax(&probs);
        let oh: Vec<F> = one_hot(y_hat, probs.len());
        let h0 = shannon_entropy(&probs);

        let mut per_aug = Vec::with_capacity(branches.len());
        for br in &branches {
            let mut dz = F::zero();
            for i in (bank.k_lt - 1)..l {
                let zi = cache_orig.z[i].item(s);
                let zg = br.cache.z[i].item(s);
                dz += squared_distance(zi, zg) / F::of_usize(zi.len());
            }
            let delta_z = dz * layer_weight;
            let q = softmax(br.cache.logits.item(s));
            let delta_l = if flags.decidedness_softmax_vs_softmax {
                squared_distance(&probs, &q)
            } else {
                squared_distance(&oh, &q)
            };
            let numerator = if flags.drop_entropy_weight {
                delta_l
            } else {
                h0 * delta_l
            };
            let s_val = if flags.drop_feature_drift {
                numerator.max(eps).ln()
            } else {
                numerator.max(eps).ln() - delta_z.max(eps).ln()
            };
            per_aug.push(AugTerm {
                delta_z,
                delta_l,
                s: s_val,
            });
        }
        // Mean in descending order so the score is bitwise invariant under
        // operator permutation.
        let mut svals: Vec<F> = per_aug.iter().map(|t| t.s).collect();
        svals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let lt = svals.iter().copied().sum::<F>() / F::of_usize(svals.len());
        breakdowns.push(LtBreakdown {
            per_aug,
            entropy_weight: h0,
            lt,
        });
    }

    Ok(LtBatchEval {
        breakdowns,
        cache_orig,
        branches,
        flags,
    })
}

/// Score a batch, dropping the caches.
pub fn lt_score_batch<F: Real>(
    x: &Tensor<F>,
    model: &ClassifierState<F>,
    bank: &AugmentationBank<F>,
    flags: LtTermFlags,
) -> Result<Vec<LtBreakdown<F>>> {
    Ok(lt_eval_batch(x, model, bank, flags)?.breakdowns)
}

/// Score a single image.
pub fn lt_score<F: Real>(
    x: &[F],
    model: &ClassifierState<F>,
    bank: &AugmentationBank<F>,
    flags: LtTermFlags,
) -> Result<LtBreakdown<F>> {
    let (c, h, w) = model.net.input_shape;
    if x.len() != c * h * w {
        return Err(Error::Contract(format!(
            "image has {} values, model expects {}",
            x.len(),
            c * h * w
        )));
    }
    let t = Tensor::from_vec(&[1, c, h, w], x.to_vec());
    let mut out = lt_score_batch(&t, model, bank, flags)?;
    Ok(out.pop().unwrap())
}

/// What [`lt_backward`] should produce.
#[derive(Debug, Clone, Copy)]
pub struct LtGradTargets {
    pub input: bool,
    pub ops: bool,
}

pub struct LtGrads<F> {
    /// Gradient of the summed per-sample LT with respect to input pixels.
    pub d_input: Option<Tensor<F>>,
    /// Gradient with respect to each operator matrix.
    pub d_ops: Option<Vec<Vec<F>>>,
}

/// Backward pass for the summed LT of a batch evaluation. The predicted
/// one-hot is treated as a constant (straight-through), matching the
/// documented relaxation for gradient-based consumers.
pub fn lt_backward<F: Real>(
    model: &ClassifierState<F>,
    bank: &AugmentationBank<F>,
    eval: &LtBatchEval<F>,
    want: LtGradTargets,
) -> LtGrads<F> {
    let flags = eval.flags;
    let b = eval.cache_orig.batch();
    let l = model.num_layers();
    let dim = bank.input_dim;
    let eps = F::of(LT_EPS_FLOOR);
    let g_count = bank.ops.len();
    let inv_g = F::of_usize(g_count).recip();
    let layer_weight = F::of_usize(l - bank.k_lt + 1).recip();

    let mut d_input: Option<Tensor<F>> = want
        .input
        .then(|| Tensor::zeros(eval.cache_orig.input.shape()));
    let mut d_ops: Option<Vec<Vec<F>>> = want
        .ops
        .then(|| bank.ops.iter().map(|o| vec![F::zero(); o.len()]).collect());

    // Original-branch cotangents accumulate across operators.
    let mut d_z_orig: Vec<Option<Tensor<F>>> = (0..l)
        .map(|i| {
            (want.input && i + 1 >= bank.k_lt && !flags.drop_feature_drift)
                .then(|| Tensor::zeros(&[b, model.layer_dims()[i]]))
        })
        .collect();
    let mut d_logits_orig: Option<Tensor<F>> =
        want.input.then(|| Tensor::zeros(&[b, model.num_classes()]));

    for (gi, br) in eval.branches.iter().enumerate() {
        // Cotangents for this augmented branch.
        let mut d_z_aug: Vec<Option<Tensor<F>>> = (0..l)
            .map(|i| {
                (i + 1 >= bank.k_lt && !flags.drop_feature_drift)
                    .then(|| Tensor::zeros(&[b, model.layer_dims()[i]]))
            })
            .collect();
        let mut d_logits_aug = Tensor::zeros(&[b, model.num_classes()]);

        for s in 0..b {
            let term = &eval.breakdowns[s].per_aug[gi];
            let probs = softmax(eval.cache_orig.logits.item(s));
            let y_hat = crate::math::argmax(&probs);
            let h0 = eval.breakdowns[s].entropy_weight;
            let q = softmax(br.cache.logits.item(s));

            // d s / d delta_l and d s / d delta_z under the floors.
            let numerator = if flags.drop_entropy_weight {
                term.delta_l
            } else {
                h0 * term.delta_l
            };
            let ds_ddl = if numerator > eps && term.delta_l > F::zero() {
                term.delta_l.recip()
            } else {
                F::zero()
            };
            let ds_ddz = if !flags.drop_feature_drift && term.delta_z > eps {
                -term.delta_z.recip()
            } else {
                F::zero()
            };
            let ds_dh0 = if !flags.drop_entropy_weight && numerator > eps {
                h0.recip()
            } else {
                F::zero()
            };
            let scale = inv_g; // d LT / d s_g

            // --- decidedness term -> augmented softmax ---
            if ds_ddl != F::zero() {
                let c = probs.len();
                // d delta_l / d q = 2 (q - ref)
                let mut dq = vec![F::zero(); c];
                if flags.decidedness_softmax_vs_softmax {
                    for j in 0..c {
                        dq[j] = (q[j] - probs[j]) * F::of(2.0);
                    }
                } else {
                    for j in 0..c {
                        let oh = if j == y_hat { F::one() } else { F::zero() };
                        dq[j] = (q[j] - oh) * F::of(2.0);
                    }
                }
                // Through softmax: dl = q .* (dq - <dq, q>)
                let dot: F = dq.iter().zip(q.iter()).map(|(&a, &p)| a * p).sum();
                let dl_row = d_logits_aug.item_mut(s);
                let w = scale * ds_ddl;
                for j in 0..c {
                    dl_row[j] += w * (q[j] * (dq[j] - dot));
                }
                // Softmax-vs-softmax also feeds the original branch.
                if flags.decidedness_softmax_vs_softmax {
                    if let Some(dlo) = d_logits_orig.as_mut() {
                        let mut dp = vec![F::zero(); c];
                        for j in 0..c {
                            dp[j] = (probs[j] - q[j]) * F::of(2.0);
                        }
                        let dot: F = dp.iter().zip(probs.iter()).map(|(&a, &p)| a * p).sum();
                        let row = dlo.item_mut(s);
                        for j in 0..c {
                            row[j] += w * (probs[j] * (dp[j] - dot));
                        }
                    }
                }
            }

            // --- feature drift -> pooled embeddings on both branches ---
            if ds_ddz != F::zero() {
                let w = scale * ds_ddz * layer_weight;
                for i in (bank.k_lt - 1)..l {
                    let zi = eval.cache_orig.z[i].item(s);
                    let zg = br.cache.z[i].item(s);
                    let per_dim = F::of_usize(zi.len()).recip();
                    if let Some(dza) = d_z_aug[i].as_mut() {
                        let row = dza.item_mut(s);
                        for j in 0..zi.len() {
                            row[j] += w * per_dim * F::of(2.0) * (zg[j] - zi[j]);
                        }
                    }
                    if let Some(dzo) = d_z_orig[i].as_mut() {
                        let row = dzo.item_mut(s);
                        for j in 0..zi.len() {
                            row[j] += w * per_dim * F::of(2.0) * (zi[j] - zg[j]);
                        }
                    }
                }
            }

            // --- entropy weight -> original logits ---
            if want.input && ds_dh0 != F::zero() {
                if let Some(dlo) = d_logits_orig.as_mut() {
                    let grad_h = softmax_entropy_grad(eval.cache_orig.logits.item(s));
                    let row = dlo.item_mut(s);
                    let w = scale * ds_dh0;
                    for j in 0..grad_h.len() {
                        row[j] += w * grad_h[j];
                    }
                }
            }
        }

        // Pull the augmented-branch cotangent back to clip(Wx).
        let d_aug_in =
            model
                .net
                .backward_input(&br.cache, &d_z_aug, Some(&d_logits_aug));
        // Clip mask from pre-activation values.
        let mut d_pre = d_aug_in;
        for (g, &p) in d_pre.data_mut().iter_mut().zip(br.pre.data().iter()) {
            if p <= F::zero() || p >= F::one() {
                *g = F::zero();
            }
        }

        if let Some(ops_grads) = d_ops.as_mut() {
            // dW += dPre^T X
            F::gemm(
                dim,
                b,
                dim,
                F::one(),
                d_pre.data(),
                1,
                dim as isize,
                eval.cache_orig.input.data(),
                dim as isize,
                1,
                F::one(),
                &mut ops_grads[gi],
                dim as isize,
                1,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // dX += dPre W
            F::gemm(
                b,
                dim,
                dim,
                F::one(),
                d_pre.data(),
                dim as isize,
                1,
                &bank.ops[gi],
                dim as isize,
                1,
                F::one(),
                dx.data_mut(),
                dim as isize,
                1,
            );
        }
    }

    if let Some(dx) = d_input.as_mut() {
        let d_orig = model.net.backward_input(
            &eval.cache_orig,
            &d_z_orig,
            d_logits_orig.as_ref(),
        );
        for (a, &v) in dx.data_mut().iter_mut().zip(d_orig.data().iter()) {
            *a += v;
        }
    }

    LtGrads { d_input, d_ops }
}

/// Fine-tune the operators on benign data: the loss is the mean LT score
/// plus `lambda * sum_g ||W_g - I||_F^2`, with a global gradient clip.
/// Keeps the best held-out epoch (the init counts), so the returned bank
/// never scores worse than the initial one on held-out data.
pub fn train_augmentations<F: Real>(
    benign: &Tensor<F>,
    model: &ClassifierState<F>,
    bank: &AugmentationBank<F>,
    cfg: &AugmentConfig,
) -> Result<AugmentationBank<F>> {
    let n = benign.len();
    if n < 4 {
        return Err(Error::Config("need at least 4 benign samples".into()));
    }
    model.net.check_input(benign)?;
    let dim = bank.input_dim;
    let flags = cfg.term_flags;

    let mut split_rng = SeedStream::new(cfg.seed, "augment-holdout");
    let order = split_rng.shuffled_indices(n);
    let n_hold = ((n as f64 * cfg.holdout_frac) as usize).clamp(1, n - 1);
    let train_idx = order[..n - n_hold].to_vec();
    let hold_idx = order[n - n_hold..].to_vec();
    let holdout = benign.gather(&hold_idx);

    let holdout_lt = |bank: &AugmentationBank<F>| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk_start in (0..holdout.len()).step_by(64) {
            let idx: Vec<usize> =
                (chunk_start..(chunk_start + 64).min(holdout.len())).collect();
            let x = holdout.gather(&idx);
            for bd in lt_score_batch(&x, model, bank, flags)? {
                total += bd.lt.as_f64();
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    };

    let mut current = bank.clone();
    let init_holdout_lt = holdout_lt(&current)?;
    let mut best = current.clone();
    let mut best_lt = init_holdout_lt;
    let mut best_epoch: Option<usize> = None;

    let mut params: Vec<Param<F>> = current
        .ops
        .iter()
        .map(|o| Param::new(o.clone()))
        .collect();
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut shuffle_rng = SeedStream::new(cfg.seed, "augment-shuffle");
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let lambda = F::of(cfg.lambda);

    for epoch in 0..cfg.epochs {
        let perm = shuffle_rng.shuffled_indices(train_idx.len());
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in perm.chunks(cfg.batch_size.max(1)) {
            let idx: Vec<usize> = chunk.iter().map(|&p| train_idx[p]).collect();
            let bsz = idx.len();
            let x = benign.gather(&idx);
            for (p, op) in params.iter().zip(current.ops.iter_mut()) {
                op.copy_from_slice(&p.value);
            }
            let eval = lt_eval_batch(&x, model, &current, flags)?;
            let batch_lt: f64 = eval.breakdowns.iter().map(|b| b.lt.as_f64()).sum();
            epoch_loss += batch_lt;
            seen += bsz;

            let grads = lt_backward(
                model,
                &current,
                &eval,
                LtGradTargets {
                    input: false,
                    ops: true,
                },
            );
            let mut d_ops = grads.d_ops.unwrap();
            let scale = F::of_usize(bsz).recip();
            for (gi, dop) in d_ops.iter_mut().enumerate() {
                for (j, dv) in dop.iter_mut().enumerate() {
                    *dv = *dv * scale;
                    // identity penalty: 2 lambda (W - I)
                    let idv = if j / dim == j % dim { F::one() } else { F::zero() };
                    *dv += F::of(2.0) * lambda * (params[gi].value[j] - idv);
                }
            }
            {
                let mut refs: Vec<&mut [F]> =
                    d_ops.iter_mut().map(|d| d.as_mut_slice()).collect();
                clip_global_norm(&mut refs, cfg.grad_clip);
            }
            opt.tick();
            for (p, dop) in params.iter_mut().zip(d_ops.iter()) {
                p.grad.copy_from_slice(dop);
                opt.step_param(p);
            }
        }
        let mean_loss = epoch_loss / seen.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training(format!(
                "augmentation loss diverged at epoch {epoch}"
            )));
        }
        loss_curve.push(mean_loss);

        for (p, op) in params.iter().zip(current.ops.iter_mut()) {
            op.copy_from_slice(&p.value);
        }
        let hl = holdout_lt(&current)?;
        if !hl.is_finite() {
            return Err(Error::Training("non-finite held-out LT".into()));
        }
        if hl < best_lt {
            best_lt = hl;
            best = current.clone();
            best_epoch = Some(epoch);
        }
    }

    best.meta = AugmentTrainMeta {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        lambda: cfg.lambda,
        init_holdout_lt,
        final_holdout_lt: best_lt,
        best_epoch,
        loss_curve,
    };
    best.model_fingerprint = bank.model_fingerprint.clone();
    Ok(best)
}

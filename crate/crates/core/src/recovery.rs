//! Recovery testing: per-layer inverse regressors trained on benign traces.
//!
//! Each head maps the final embedding `z_L` back to an intermediate
//! embedding `z_k` (k in `[k_rt, L-1]`). At test time the per-dimension
//! squared reconstruction errors form a vector `e`; the score weights the
//! log of the mean error by how far the softmax of `e` is from uniform, so
//! a few large shifts produce large scores while uniformly small (or
//! uniformly inflated) errors do not.

use crate::error::{Error, Result};
use crate::math::{softmax, softmax_entropy};
use crate::model::LayerTrace;
use crate::nn::{AdamW, Mlp, MlpCache};
use crate::rng::SeedStream;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Floor inside `ln(mean(e))`, keeps the score finite on (near-)perfect
/// reconstruction.
pub const RT_EPS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecoveryConfig {
    /// First recovered layer (1-based); heads cover `k_rt ..= L-1`.
    pub k_rt: usize,
    /// Hidden layers per head.
    pub depth: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of traces held out for the loss contract.
    pub holdout_frac: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            k_rt: 1,
            depth: 3,
            hidden_dim: 512,
            epochs: 50,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 0,
            holdout_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RecoveryTrainMeta {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean per-sample total squared reconstruction error on the held-out
    /// slice, before and after training.
    pub init_holdout_loss: f64,
    pub final_holdout_loss: f64,
    /// Mean training loss per epoch (summed over heads).
    pub loss_curve: Vec<f64>,
}

/// Trained inverse regressors for one classifier.
#[derive(Debug, Clone)]
pub struct RecoveryBank<F> {
    /// `k -> head` mapping `z_L` to `z_k`, keys exactly `k_rt ..= L-1`.
    pub heads: BTreeMap<usize, Mlp<F>>,
    pub k_rt: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    /// Embedding dimensionality of every layer of the source model.
    pub layer_dims: Vec<usize>,
    /// Mean benign reconstruction error per recovered layer, measured on
    /// the held-out slice after training. Scoring divides by these so a
    /// benign input sits near 1 in every layer; adversarial shifts then
    /// push the mean above 1, the regime where the log-mean factor grows
    /// with the shift instead of shrinking.
    pub benign_error_scale: Vec<f64>,
    pub meta: RecoveryTrainMeta,
    /// Fingerprint of the classifier the bank was trained against.
    pub model_fingerprint: String,
}

impl<F: Real> RecoveryBank<F> {
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    /// Number of recovered layers `M = L - k_rt`.
    pub fn num_recovered(&self) -> usize {
        self.layer_dims.len() - self.k_rt
    }

    pub fn param_count(&self) -> usize {
        self.heads.values().map(|h| h.param_count()).sum()
    }
}

/// Per-layer reconstruction errors `e_k`, `k` in `[k_rt, L-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorVector<F> {
    pub e: Vec<F>,
    pub k_rt: usize,
}

impl<F: Real> ErrorVector<F> {
    pub fn validate(&self) -> Result<()> {
        if self.e.len() < 2 {
            return Err(Error::Contract(format!(
                "error vector needs >= 2 layers, got {}",
                self.e.len()
            )));
        }
        for &v in &self.e {
            if !(v >= F::zero()) || !v.is_finite() {
                return Err(Error::Validation(format!("invalid layer error {v}")));
            }
        }
        Ok(())
    }
}

/// Term-removal switches for the score ablation.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct RtTermFlags {
    /// Drop the `ln(M) - H(softmax(e))` factor.
    #[serde(default)]
    pub drop_inverse_entropy: bool,
    /// Drop the `ln(mean(e))` factor.
    #[serde(default)]
    pub drop_log_error: bool,
}

/// Train one inverse regressor per recovered layer on benign traces.
/// Labels are never used. Deterministic given `cfg.seed`.
pub fn train_recovery_bank<F: Real>(
    traces: &[LayerTrace<F>],
    cfg: &RecoveryConfig,
) -> Result<RecoveryBank<F>> {
    if traces.len() < 2 {
        return Err(Error::Config("need at least 2 traces to train on".into()));
    }
    let layer_dims: Vec<usize> = traces[0].z.iter().map(|z| z.len()).collect();
    let l = layer_dims.len();
    if cfg.k_rt < 1 || cfg.k_rt > l - 1 {
        return Err(Error::Config(format!(
            "k_rt = {} out of range [1, {}]",
            cfg.k_rt,
            l - 1
        )));
    }
    let d_last = layer_dims[l - 1];
    let n = traces.len();

    // Deterministic holdout split.
    let mut split_rng = SeedStream::new(cfg.seed, "recovery-holdout");
    let order = split_rng.shuffled_indices(n);
    let n_hold = ((n as f64 * cfg.holdout_frac) as usize).clamp(1, n - 1);
    let train_idx = &order[..n - n_hold];
    let hold_idx = &order[n - n_hold..];

    // Flat z_L inputs.
    let inputs: Vec<F> = traces
        .iter()
        .flat_map(|t| t.z[l - 1].iter().copied())
        .collect();
    let input_of = |i: usize| &inputs[i * d_last..(i + 1) * d_last];

    let mut heads: BTreeMap<usize, Mlp<F>> = BTreeMap::new();
    for k in cfg.k_rt..l {
        let mut rng = SeedStream::new(cfg.seed, &format!("recovery-init-{k}"));
        heads.insert(
            k,
            Mlp::new(d_last, layer_dims[k - 1], cfg.hidden_dim, cfg.depth, &mut rng),
        );
    }

    let holdout_loss = |heads: &BTreeMap<usize, Mlp<F>>| -> f64 {
        let mut total = 0.0f64;
        for &i in hold_idx {
            let t = &traces[i];
            for (&k, head) in heads.iter() {
                let mut out = vec![F::zero(); head.dout];
                head.forward(input_of(i), 1, &mut out);
                let mut sq = 0.0f64;
                for (o, &z) in out.iter().zip(t.z[k - 1].iter()) {
                    let d = o.as_f64() - z.as_f64();
                    sq += d * d;
                }
                total += sq;
            }
        }
        total / hold_idx.len() as f64
    };

    let init_holdout_loss = holdout_loss(&heads);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    let keys: Vec<usize> = heads.keys().copied().collect();
    let mut optimizers: BTreeMap<usize, AdamW> = keys
        .iter()
        .map(|&k| (k, AdamW::new(cfg.lr, cfg.weight_decay)))
        .collect();
    let mut shuffle_rng = SeedStream::new(cfg.seed, "recovery-shuffle");

    for epoch in 0..cfg.epochs {
        let perm = shuffle_rng.shuffled_indices(train_idx.len());
        let order: Vec<usize> = perm.iter().map(|&p| train_idx[p]).collect();
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let bsz = chunk.len();
            let mut x = Vec::with_capacity(bsz * d_last);
            for &i in chunk {
                x.extend_from_slice(input_of(i));
            }
            for &k in &keys {
                let head = heads.get_mut(&k).unwrap();
                let cache = head.forward_cached(&x, bsz);
                let dk = head.dout;
                let mut dy = vec![F::zero(); bsz * dk];
                let scale = F::of(2.0 / bsz as f64);
                let mut batch_loss = 0.0f64;
                for (bi, &i) in chunk.iter().enumerate() {
                    let target = &traces[i].z[k - 1];
                    for j in 0..dk {
                        let diff = cache.out[bi * dk + j] - target[j];
                        batch_loss += diff.as_f64() * diff.as_f64();
                        dy[bi * dk + j] = diff * scale;
                    }
                }
                epoch_loss += batch_loss;
                head.zero_grad();
                head.backward_params(&cache, &dy);
                let opt = optimizers.get_mut(&k).unwrap();
                opt.tick();
                for p in head.params_mut() {
                    opt.step_param(p);
                }
            }
        }
        let mean_loss = epoch_loss / train_idx.len().max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training(format!(
                "recovery loss diverged at epoch {epoch}"
            )));
        }
        loss_curve.push(mean_loss);
    }

    let final_holdout_loss = holdout_loss(&heads);
    if !final_holdout_loss.is_finite() {
        return Err(Error::Training("non-finite held-out loss".into()));
    }

    // Per-layer benign error level on the held-out slice.
    let m = l - cfg.k_rt;
    let mut benign_error_scale = vec![0.0f64; m];
    for &i in hold_idx {
        let t = &traces[i];
        for (j, (&k, head)) in heads.iter().enumerate() {
            let mut out = vec![F::zero(); head.dout];
            head.forward(input_of(i), 1, &mut out);
            let mut sq = 0.0f64;
            for (o, &z) in out.iter().zip(t.z[k - 1].iter()) {
                let d = o.as_f64() - z.as_f64();
                sq += d * d;
            }
            benign_error_scale[j] += sq / head.dout as f64;
        }
    }
    for s in benign_error_scale.iter_mut() {
        *s = (*s / hold_idx.len() as f64).max(RT_EPS_FLOOR);
    }

    Ok(RecoveryBank {
        heads,
        k_rt: cfg.k_rt,
        depth: cfg.depth,
        hidden_dim: cfg.hidden_dim,
        layer_dims,
        benign_error_scale,
        meta: RecoveryTrainMeta {
            epochs: cfg.epochs,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            init_holdout_loss,
            final_holdout_loss,
            loss_curve,
        },
        model_fingerprint: String::new(),
    })
}

/// Per-layer, per-dimension mean squared reconstruction errors:
/// `e_k = ||z_k - R_k(z_L)||^2 / D_k`.
pub fn layer_errors<F: Real>(
    trace: &LayerTrace<F>,
    bank: &RecoveryBank<F>,
) -> Result<ErrorVector<F>> {
    let (e, _) = layer_errors_with_caches(trace, bank)?;
    Ok(e)
}

/// [`layer_errors`] rescaled to benign units: each entry divided by the
/// bank's held-out benign mean for that layer. This is the error vector the
/// detector scores.
pub fn calibrated_layer_errors<F: Real>(
    trace: &LayerTrace<F>,
    bank: &RecoveryBank<F>,
) -> Result<ErrorVector<F>> {
    let mut e = layer_errors(trace, bank)?;
    apply_error_scale(&mut e, bank);
    Ok(e)
}

pub fn apply_error_scale<F: Real>(e: &mut ErrorVector<F>, bank: &RecoveryBank<F>) {
    debug_assert_eq!(e.e.len(), bank.benign_error_scale.len());
    for (v, &s) in e.e.iter_mut().zip(bank.benign_error_scale.iter()) {
        *v = *v / F::of(s);
    }
}

/// As [`layer_errors`], also returning per-head forward caches and residuals
/// for gradient-based consumers (the adaptive attack).
#[allow(clippy::type_complexity)]
pub fn layer_errors_with_caches<F: Real>(
    trace: &LayerTrace<F>,
    bank: &RecoveryBank<F>,
) -> Result<(ErrorVector<F>, Vec<(usize, MlpCache<F>, Vec<F>)>)> {
    let dims: Vec<usize> = trace.z.iter().map(|z| z.len()).collect();
    if dims != bank.layer_dims {
        return Err(Error::Contract(format!(
            "trace layer dims {dims:?} do not match bank dims {:?}",
            bank.layer_dims
        )));
    }
    let l = dims.len();
    let z_last = &trace.z[l - 1];
    let mut e = Vec::with_capacity(l - bank.k_rt);
    let mut caches = Vec::with_capacity(l - bank.k_rt);
    for (&k, head) in bank.heads.iter() {
        let cache = head.forward_cached(z_last, 1);
        let target = &trace.z[k - 1];
        let dk = target.len();
        let mut sq = F::zero();
        let mut residual = Vec::with_capacity(dk);
        for (o, &t) in cache.out.iter().zip(target.iter()) {
            let d = *o - t;
            residual.push(d);
            sq += d * d;
        }
        e.push(sq / F::of_usize(dk));
        caches.push((k, cache, residual));
    }
    Ok((
        ErrorVector {
            e,
            k_rt: bank.k_rt,
        },
        caches,
    ))
}

/// Canonical evaluation order: descending by value, with the permutation
/// that restores original positions. Sorting makes the float reductions
/// order-independent, so the score is bitwise permutation-invariant.
fn canonical_order<F: Real>(e: &[F]) -> (Vec<F>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..e.len()).collect();
    idx.sort_by(|&a, &b| e[b].partial_cmp(&e[a]).unwrap_or(std::cmp::Ordering::Equal));
    let sorted = idx.iter().map(|&i| e[i]).collect();
    (sorted, idx)
}

/// The recovery-testing score
/// `RT(e) = (ln M - H(softmax(e))) * ln(max(eps, mean(e)))`.
pub fn rt_score<F: Real>(e: &ErrorVector<F>) -> F {
    rt_score_with_flags(e, RtTermFlags::default())
}

pub fn rt_score_with_flags<F: Real>(e: &ErrorVector<F>, flags: RtTermFlags) -> F {
    debug_assert!(e.e.len() >= 2);
    let (sorted, _) = canonical_order(&e.e);
    let m = sorted.len();
    let inv_entropy = F::of_usize(m).ln() - softmax_entropy(&sorted);
    let mean: F = sorted.iter().copied().sum::<F>() / F::of_usize(m);
    let log_mean = mean.max(F::of(RT_EPS_FLOOR)).ln();
    match (flags.drop_inverse_entropy, flags.drop_log_error) {
        (false, false) => inv_entropy * log_mean,
        (true, false) => log_mean,
        (false, true) => inv_entropy,
        (true, true) => F::zero(),
    }
}

/// Gradient of [`rt_score_with_flags`] with respect to the entries of `e`.
pub fn rt_score_grad<F: Real>(e: &ErrorVector<F>, flags: RtTermFlags) -> Vec<F> {
    let (sorted, idx) = canonical_order(&e.e);
    let m = sorted.len();
    let m_f = F::of_usize(m);
    let p = softmax(&sorted);
    let h = softmax_entropy(&sorted);
    let inv_entropy = m_f.ln() - h;
    let mean: F = sorted.iter().copied().sum::<F>() / m_f;
    let mean_active = mean > F::of(RT_EPS_FLOOR);
    let log_mean = mean.max(F::of(RT_EPS_FLOOR)).ln();

    let mut grad_sorted = vec![F::zero(); m];
    for j in 0..m {
        // d(ln M - H)/de_j = p_j (ln p_j + H)
        let d_inv_entropy = if p[j] > F::zero() {
            p[j] * (p[j].ln() + h)
        } else {
            F::zero()
        };
        let d_log_mean = if mean_active {
            (m_f * mean).recip()
        } else {
            F::zero()
        };
        grad_sorted[j] = match (flags.drop_inverse_entropy, flags.drop_log_error) {
            (false, false) => d_inv_entropy * log_mean + inv_entropy * d_log_mean,
            (true, false) => d_log_mean,
            (false, true) => d_inv_entropy,
            (true, true) => F::zero(),
        };
    }
    let mut grad = vec![F::zero(); m];
    for (j, &orig) in idx.iter().enumerate() {
        grad[orig] = grad_sorted[j];
    }
    grad
}

//! Shared math primitives: stable softmax, Shannon entropy, one-hot vectors,
//! and the standard normal CDF / quantile pair used by score fusion.

use crate::scalar::Real;

/// Stable softmax with max subtraction; entries positive, sum 1.
pub fn softmax<F: Real>(v: &[F]) -> Vec<F> {
    assert!(!v.is_empty(), "softmax of empty vector");
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: F = out.iter().copied().sum();
    for o in out.iter_mut() {
        *o = *o / s;
    }
    out
}

/// Shannon entropy in nats of a probability vector; 0*ln(0) treated as 0.
pub fn shannon_entropy<F: Real>(p: &[F]) -> F {
    let mut h = F::zero();
    for &pi in p {
        if pi > F::zero() {
            h = h - pi * pi.ln();
        }
    }
    h
}

/// Entropy of `softmax(v)` computed through the log-sum-exp identity
/// `H = ln S - sum(p_i * (v_i - m))`. For a constant vector this returns
/// `ln(len)` exactly, which keeps uniform-error recovery scores at exactly 0.
pub fn softmax_entropy<F: Real>(v: &[F]) -> F {
    assert!(!v.is_empty());
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    let mut weighted = F::zero();
    for &x in v {
        let e = (x - m).exp();
        s += e;
        weighted += e * (x - m);
    }
    s.ln() - weighted / s
}

/// Gradient of [`softmax_entropy`] with respect to `v`:
/// `dH/dv_j = -p_j * (ln p_j + H)`.
pub fn softmax_entropy_grad<F: Real>(v: &[F]) -> Vec<F> {
    let p = softmax(v);
    let h = softmax_entropy(v);
    p.iter()
        .map(|&pj| {
            if pj > F::zero() {
                -(pj * (pj.ln() + h))
            } else {
                F::zero()
            }
        })
        .collect()
}

/// Index of the maximum entry (first one on ties).
pub fn argmax<F: Real>(v: &[F]) -> usize {
    assert!(!v.is_empty());
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot<F: Real>(index: usize, len: usize) -> Vec<F> {
    assert!(index < len);
    let mut v = vec![F::zero(); len];
    v[index] = F::one();
    v
}

/// Squared Euclidean distance between two equal-length vectors.
pub fn squared_distance<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function (inverse CDF).
///
/// Acklam's rational approximation refined with one Halley step against
/// [`normal_cdf`]; absolute error well below 1e-12 on (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(
        p > 0.0 && p < 1.0,
        "normal_quantile requires p in (0,1), got {p}"
    );

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // One Halley refinement.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0f64, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariant_no_overflow() {
        let p = softmax(&[1000.0f64, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let a = softmax(&[1.0f64, 2.0, 3.0]);
        let b = softmax(&[101.0f64, 102.0, 103.0]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_hand_values() {
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        assert_eq!(shannon_entropy(&[0.0f64, 1.0, 0.0]), 0.0);
    }

    #[test]
    fn entropy_uniform_is_ln_k() {
        let k = 7;
        let p = vec![1.0f64 / k as f64; k];
        assert!((shannon_entropy(&p) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_hand_value() {
        // -(0.25 ln 0.25 + 0.75 ln 0.75)
        let h = shannon_entropy(&[0.25f64, 0.75]);
        assert!((h - 0.5623).abs() < 1e-4, "{h}");
    }

    #[test]
    fn softmax_entropy_uniform_exact() {
        for m in [2usize, 3, 5, 8] {
            let v = vec![3.7f64; m];
            assert_eq!(softmax_entropy(&v), (m as f64).ln());
        }
    }

    #[test]
    fn softmax_entropy_matches_composition() {
        let v = [0.3f64, -1.2, 2.2, 0.0];
        let direct = softmax_entropy(&v);
        let composed = shannon_entropy(&softmax(&v));
        assert!((direct - composed).abs() < 1e-12);
    }

    #[test]
    fn softmax_entropy_grad_matches_fd() {
        let v = [0.5f64, -0.7, 1.3];
        let g = softmax_entropy_grad(&v);
        let h = 1e-6;
        for i in 0..v.len() {
            let mut vp = v;
            vp[i] += h;
            let mut vm = v;
            vm[i] -= h;
            let fd = (softmax_entropy(&vp) - softmax_entropy(&vm)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8, "{} vs {}", g[i], fd);
        }
    }

    #[test]
    fn quantile_hand_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!(normal_quantile(0.5).abs() < 1e-15);
        assert!((normal_quantile(0.025) + 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn quantile_is_inverse_of_cdf() {
        // Independent route: bisection on normal_cdf.
        for &p in &[1e-6, 0.01, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-6] {
            let x = normal_quantile(p);
            let (mut lo, mut hi) = (-10.0f64, 10.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if normal_cdf(mid) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert!((x - 0.5 * (lo + hi)).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), 1);
    }
}

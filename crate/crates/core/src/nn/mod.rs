//! Minimal neural-network kernels: dense and convolution layers with
//! hand-written backward passes, an AdamW stepper, and the small MLP used by
//! the recovery heads. Everything is sequential and allocation-explicit so
//! repeated runs with the same seed are bit-identical.

mod conv;
mod linear;
mod mlp;

pub use conv::Conv2d;
pub use linear::Linear;
pub use mlp::{Mlp, MlpCache};

use crate::scalar::Real;
use serde::{Deserialize, Serialize};

/// A trainable buffer: value plus gradient and AdamW moments.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: Vec<F>) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![F::zero(); n],
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.iter_mut() {
            *g = F::zero();
        }
    }
}

/// AdamW configuration and step counter. Weight decay is decoupled
/// (applied directly to the value, not through the moments).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before stepping the parameters of that batch.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn step_param<F: Real>(&self, p: &mut Param<F>) {
        debug_assert!(self.t > 0, "tick() before step_param()");
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let bc1 = F::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::of(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        let wd = F::of(self.weight_decay);
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + (one - b1) * g;
            p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            let mut val = p.value[i];
            val = val - lr * (m_hat / (v_hat.sqrt() + eps) + wd * val);
            p.value[i] = val;
        }
    }
}

/// Scale gradients in-place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut [&mut [F]], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.iter() {
            let x = x.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// SiLU (x * sigmoid(x)): the smooth hidden nonlinearity used by the MLPs.
#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// In-place ReLU; returns nothing, mask is recoverable from the output.
pub fn relu_inplace<F: Real>(xs: &mut [F]) {
    for x in xs.iter_mut() {
        if *x < F::zero() {
            *x = F::zero();
        }
    }
}

/// Multiply cotangent by the ReLU mask of `out` (out = relu(pre)).
pub fn relu_backward_inplace<F: Real>(cotangent: &mut [F], out: &[F]) {
    debug_assert_eq!(cotangent.len(), out.len());
    for (g, &o) in cotangent.iter_mut().zip(out.iter()) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}

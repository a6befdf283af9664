use super::{silu, silu_grad, Linear, Param};
use crate::rng::SeedStream;
use crate::scalar::Real;

/// Fully connected regressor: `depth` hidden SiLU layers of width
/// `hidden_dim`, linear output. `depth = 0` degenerates to a single linear
/// map (used by tests that need exactly representable heads).
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub din: usize,
    pub dout: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub layers: Vec<Linear<F>>,
}

/// Per-batch activations cached by [`Mlp::forward_cached`].
pub struct MlpCache<F> {
    /// Input to each layer (first entry is the network input).
    pub inputs: Vec<Vec<F>>,
    /// Pre-activation outputs of the hidden layers.
    pub pre: Vec<Vec<F>>,
    pub out: Vec<F>,
    pub batch: usize,
}

impl<F: Real> Mlp<F> {
    pub fn new(
        din: usize,
        dout: usize,
        hidden_dim: usize,
        depth: usize,
        rng: &mut SeedStream,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut prev = din;
        for _ in 0..depth {
            layers.push(Linear::new(prev, hidden_dim, 2.0, rng));
            prev = hidden_dim;
        }
        layers.push(Linear::new(prev, dout, 1.0, rng));
        Mlp {
            din,
            dout,
            hidden_dim,
            depth,
            layers,
        }
    }

    pub fn from_layers(layers: Vec<Linear<F>>) -> Self {
        assert!(!layers.is_empty());
        let din = layers[0].din;
        let dout = layers.last().unwrap().dout;
        let depth = layers.len() - 1;
        let hidden_dim = if depth > 0 { layers[0].dout } else { 0 };
        Mlp {
            din,
            dout,
            hidden_dim,
            depth,
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn forward(&self, x: &[F], batch: usize, out: &mut [F]) {
        let cache = self.forward_cached(x, batch);
        out.copy_from_slice(&cache.out);
    }

    pub fn forward_cached(&self, x: &[F], batch: usize) -> MlpCache<F> {
        debug_assert_eq!(x.len(), batch * self.din);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.depth);
        inputs.push(x.to_vec());
        for i in 0..self.depth {
            let layer = &self.layers[i];
            let mut y = vec![F::zero(); batch * layer.dout];
            layer.forward(inputs.last().unwrap(), batch, &mut y);
            pre.push(y.clone());
            for v in y.iter_mut() {
                *v = silu(*v);
            }
            inputs.push(y);
        }
        let last = self.layers.last().unwrap();
        let mut out = vec![F::zero(); batch * last.dout];
        last.forward(inputs.last().unwrap(), batch, &mut out);
        MlpCache {
            inputs,
            pre,
            out,
            batch,
        }
    }

    /// Input cotangent of the cached forward; does not touch parameter
    /// gradients, usable on a shared `&self`.
    pub fn backward_input(&self, cache: &MlpCache<F>, dy: &[F]) -> Vec<F> {
        let batch = cache.batch;
        let mut cot = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let mut dx = vec![F::zero(); batch * self.layers[i].din];
            self.layers[i].backward_input(&cot, batch, &mut dx);
            if i > 0 {
                let pre = &cache.pre[i - 1];
                for (g, &p) in dx.iter_mut().zip(pre.iter()) {
                    *g = *g * silu_grad(p);
                }
            }
            cot = dx;
        }
        cot
    }

    /// Accumulate parameter gradients for the cached forward.
    pub fn backward_params(&mut self, cache: &MlpCache<F>, dy: &[F]) {
        let batch = cache.batch;
        let mut cot = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            self.layers[i].backward_params(&cache.inputs[i], &cot, batch);
            if i == 0 {
                break;
            }
            let mut dx = vec![F::zero(); batch * self.layers[i].din];
            self.layers[i].backward_input(&cot, batch, &mut dx);
            let pre = &cache.pre[i - 1];
            for (g, &p) in dx.iter_mut().zip(pre.iter()) {
                *g = *g * silu_grad(p);
            }
            cot = dx;
        }
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers.iter_mut() {
            l.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in self.layers.iter_mut() {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    /// Flat parameter vectors in a stable order, for serialization.
    pub fn param_tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("l{i}.w"), vec![l.dout, l.din], l.w.value.as_slice()));
            out.push((format!("l{i}.b"), vec![l.dout], l.b.value.as_slice()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_is_linear() {
        let lin = Linear::from_weights(2, 2, vec![1.0f64, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let mlp = Mlp::from_layers(vec![lin]);
        let mut out = vec![0.0; 2];
        mlp.forward(&[3.0, -4.0], 1, &mut out);
        assert_eq!(out, vec![3.0, -4.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeedStream::new(3, "mlp-grad");
        let mut mlp: Mlp<f64> = Mlp::new(3, 2, 8, 2, &mut rng);
        let x = [0.3, -0.8, 1.1, -0.2, 0.9, 0.4];
        let batch = 2;

        let eval = |mlp: &Mlp<f64>, x: &[f64]| {
            let mut y = vec![0.0; batch * mlp.dout];
            mlp.forward(x, batch, &mut y);
            y.iter().map(|v| v * v).sum::<f64>()
        };

        let cache = mlp.forward_cached(&x, batch);
        let dy: Vec<f64> = cache.out.iter().map(|v| 2.0 * v).collect();
        mlp.zero_grad();
        let dx = mlp.backward_input(&cache, &dy);
        mlp.backward_params(&cache, &dy);

        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (eval(&mlp, &xp) - eval(&mlp, &xm)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-5, "dx[{i}] {} vs {}", dx[i], fd);
        }
        // Spot-check weight gradients in each layer.
        for li in 0..mlp.layers.len() {
            for wi in [0usize, 1, 5] {
                let orig = mlp.layers[li].w.value[wi];
                mlp.layers[li].w.value[wi] = orig + h;
                let up = eval(&mlp, &x);
                mlp.layers[li].w.value[wi] = orig - h;
                let down = eval(&mlp, &x);
                mlp.layers[li].w.value[wi] = orig;
                let fd = (up - down) / (2.0 * h);
                let got = mlp.layers[li].w.grad[wi];
                assert!((got - fd).abs() < 1e-5, "layer {li} w[{wi}]: {got} vs {fd}");
            }
        }
    }

    #[test]
    fn param_count_formula() {
        let mut rng = SeedStream::new(0, "count");
        // From a 64-dim embedding through 3 hidden layers of 512 to 32 dims.
        let mlp: Mlp<f32> = Mlp::new(64, 32, 512, 3, &mut rng);
        let expected = 64 * 512 + 512 + 2 * (512 * 512 + 512) + 512 * 32 + 32;
        assert_eq!(mlp.param_count(), expected);
    }
}

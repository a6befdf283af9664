use super::Param;
use crate::rng::SeedStream;
use crate::scalar::Real;

/// Fully connected layer, `y = x W^T + b`, weights stored row-major
/// `[dout, din]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub din: usize,
    pub dout: usize,
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> Linear<F> {
    /// Kaiming-normal init scaled for the given fan-in gain.
    pub fn new(din: usize, dout: usize, gain: f64, rng: &mut SeedStream) -> Self {
        let sd = F::of((gain / din as f64).sqrt());
        let mut w = vec![F::zero(); dout * din];
        rng.fill_normal(&mut w, sd);
        Linear {
            din,
            dout,
            w: Param::new(w),
            b: Param::new(vec![F::zero(); dout]),
        }
    }

    pub fn from_weights(din: usize, dout: usize, w: Vec<F>, b: Vec<F>) -> Self {
        assert_eq!(w.len(), din * dout);
        assert_eq!(b.len(), dout);
        Linear {
            din,
            dout,
            w: Param::new(w),
            b: Param::new(b),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Forward for a `[batch, din]` slice into a `[batch, dout]` buffer.
    pub fn forward(&self, x: &[F], batch: usize, y: &mut [F]) {
        debug_assert_eq!(x.len(), batch * self.din);
        debug_assert_eq!(y.len(), batch * self.dout);
        for bi in 0..batch {
            y[bi * self.dout..(bi + 1) * self.dout].copy_from_slice(&self.b.value);
        }
        if batch == 0 {
            return;
        }
        F::gemm(
            batch,
            self.din,
            self.dout,
            F::one(),
            x,
            self.din as isize,
            1,
            &self.w.value,
            1,
            self.din as isize,
            F::one(),
            y,
            self.dout as isize,
            1,
        );
    }

    /// Input cotangent `dx = dy W`, overwriting `dx`.
    pub fn backward_input(&self, dy: &[F], batch: usize, dx: &mut [F]) {
        debug_assert_eq!(dy.len(), batch * self.dout);
        debug_assert_eq!(dx.len(), batch * self.din);
        F::gemm(
            batch,
            self.dout,
            self.din,
            F::one(),
            dy,
            self.dout as isize,
            1,
            &self.w.value,
            self.din as isize,
            1,
            F::zero(),
            dx,
            self.din as isize,
            1,
        );
    }

    /// Accumulate parameter gradients: `dW += dy^T x`, `db += sum(dy)`.
    pub fn backward_params(&mut self, x: &[F], dy: &[F], batch: usize) {
        debug_assert_eq!(x.len(), batch * self.din);
        debug_assert_eq!(dy.len(), batch * self.dout);
        F::gemm(
            self.dout,
            batch,
            self.din,
            F::one(),
            dy,
            1,
            self.dout as isize,
            x,
            self.din as isize,
            1,
            F::one(),
            &mut self.w.grad,
            self.din as isize,
            1,
        );
        for bi in 0..batch {
            for o in 0..self.dout {
                self.b.grad[o] += dy[bi * self.dout + o];
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.w.zero_grad();
        self.b.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_loops() {
        let lin = Linear::from_weights(
            3,
            2,
            vec![1.0f64, 2.0, 3.0, -1.0, 0.5, 0.0],
            vec![0.1, -0.2],
        );
        let x = [1.0, -1.0, 2.0, 0.0, 1.0, 1.0];
        let mut y = [0.0; 4];
        lin.forward(&x, 2, &mut y);
        // sample 0: [1*1 + 2*(-1) + 3*2 + 0.1, -1*1 + 0.5*(-1) + 0 + (-0.2)]
        assert!((y[0] - 5.1).abs() < 1e-12);
        assert!((y[1] + 1.7).abs() < 1e-12);
        // sample 1: [0 + 2 + 3 + 0.1, 0 + 0.5 + 0 - 0.2]
        assert!((y[2] - 5.1).abs() < 1e-12);
        assert!((y[3] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeedStream::new(1, "lin-test");
        let mut lin: Linear<f64> = Linear::new(4, 3, 2.0, &mut rng);
        let x: Vec<f64> = (0..8).map(|i| (i as f64) * 0.25 - 1.0).collect();
        let batch = 2;

        // Scalar objective: sum of squares of outputs.
        let eval = |lin: &Linear<f64>, x: &[f64]| {
            let mut y = vec![0.0; batch * lin.dout];
            lin.forward(x, batch, &mut y);
            y.iter().map(|v| v * v).sum::<f64>()
        };

        let mut y = vec![0.0; batch * lin.dout];
        lin.forward(&x, batch, &mut y);
        let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut dx = vec![0.0; batch * lin.din];
        lin.zero_grad();
        lin.backward_input(&dy, batch, &mut dx);
        lin.backward_params(&x, &dy, batch);

        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (eval(&lin, &xp) - eval(&lin, &xm)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-5, "dx[{i}]: {} vs {}", dx[i], fd);
        }
        for i in 0..lin.w.len() {
            let orig = lin.w.value[i];
            lin.w.value[i] = orig + h;
            let up = eval(&lin, &x);
            lin.w.value[i] = orig - h;
            let down = eval(&lin, &x);
            lin.w.value[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (lin.w.grad[i] - fd).abs() < 1e-5,
                "dw[{i}]: {} vs {}",
                lin.w.grad[i],
                fd
            );
        }
        for i in 0..lin.b.len() {
            let orig = lin.b.value[i];
            lin.b.value[i] = orig + h;
            let up = eval(&lin, &x);
            lin.b.value[i] = orig - h;
            let down = eval(&lin, &x);
            lin.b.value[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((lin.b.grad[i] - fd).abs() < 1e-5);
        }
    }
}

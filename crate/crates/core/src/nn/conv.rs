use super::Param;
use crate::rng::SeedStream;
use crate::scalar::Real;

/// 2D convolution over NCHW maps via im2col + gemm, one image at a time.
/// Weights are stored `[cout, cin * k * k]` row-major.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> Conv2d<F> {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeedStream,
    ) -> Self {
        let fan_in = cin * k * k;
        let sd = F::of((2.0 / fan_in as f64).sqrt());
        let mut w = vec![F::zero(); cout * fan_in];
        rng.fill_normal(&mut w, sd);
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            w: Param::new(w),
            b: Param::new(vec![F::zero(); cout]),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// im2col for one image `[cin, h, w]` into `cols[[cin*k*k], oh*ow]`.
    pub fn im2col(&self, x: &[F], h: usize, w: usize, cols: &mut [F]) {
        let (oh, ow) = self.out_hw(h, w);
        let ncols = oh * ow;
        debug_assert_eq!(x.len(), self.cin * h * w);
        debug_assert_eq!(cols.len(), self.col_rows() * ncols);
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let out_row = &mut cols[row * ncols..(row + 1) * ncols];
                    let mut col = 0;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            for v in &mut out_row[col..col + ow] {
                                *v = F::zero();
                            }
                            col += ow;
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            out_row[col] = if ix < 0 || ix >= w as isize {
                                F::zero()
                            } else {
                                plane[base + ix as usize]
                            };
                            col += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-add of a column matrix back to image layout (adjoint of
    /// im2col).
    fn col2im_add(&self, cols: &[F], h: usize, w: usize, dx: &mut [F]) {
        let (oh, ow) = self.out_hw(h, w);
        let ncols = oh * ow;
        let mut row = 0;
        for c in 0..self.cin {
            let plane_off = c * h * w;
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let in_row = &cols[row * ncols..(row + 1) * ncols];
                    let mut col = 0;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            col += ow;
                            continue;
                        }
                        let base = plane_off + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += in_row[col];
                            }
                            col += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Forward for one image: writes `[cout, oh*ow]` into `y`, using `cols`
    /// as the im2col scratch buffer.
    pub fn forward_image(&self, x: &[F], h: usize, w: usize, cols: &mut [F], y: &mut [F]) {
        let (oh, ow) = self.out_hw(h, w);
        let ncols = oh * ow;
        debug_assert_eq!(y.len(), self.cout * ncols);
        self.im2col(x, h, w, cols);
        for co in 0..self.cout {
            let bias = self.b.value[co];
            for v in &mut y[co * ncols..(co + 1) * ncols] {
                *v = bias;
            }
        }
        F::gemm(
            self.cout,
            self.col_rows(),
            ncols,
            F::one(),
            &self.w.value,
            self.col_rows() as isize,
            1,
            cols,
            ncols as isize,
            1,
            F::one(),
            y,
            ncols as isize,
            1,
        );
    }

    /// Input cotangent for one image, **added** into `dx` (residual blocks
    /// merge several paths). `dcols_buf` is scratch of size
    /// `col_rows() * oh * ow`.
    pub fn backward_input(
        &self,
        dy: &[F],
        h: usize,
        w: usize,
        dx: &mut [F],
        dcols_buf: &mut [F],
    ) {
        let (oh, ow) = self.out_hw(h, w);
        let ncols = oh * ow;
        debug_assert_eq!(dy.len(), self.cout * ncols);
        debug_assert_eq!(dx.len(), self.cin * h * w);
        // dcols = W^T dy
        F::gemm(
            self.col_rows(),
            self.cout,
            ncols,
            F::one(),
            &self.w.value,
            1,
            self.col_rows() as isize,
            dy,
            ncols as isize,
            1,
            F::zero(),
            dcols_buf,
            ncols as isize,
            1,
        );
        self.col2im_add(dcols_buf, h, w, dx);
    }

    /// Accumulate parameter gradients for one image from its cached column
    /// matrix: `dW += dy cols^T`, `db += row sums of dy`.
    pub fn backward_params(&mut self, cols: &[F], dy: &[F], h: usize, w: usize) {
        let (oh, ow) = self.out_hw(h, w);
        let ncols = oh * ow;
        let cr = self.col_rows();
        F::gemm(
            self.cout,
            ncols,
            cr,
            F::one(),
            dy,
            ncols as isize,
            1,
            cols,
            1,
            ncols as isize,
            F::one(),
            &mut self.w.grad,
            cr as isize,
            1,
        );
        for co in 0..self.cout {
            let mut acc = F::zero();
            for &v in &dy[co * ncols..(co + 1) * ncols] {
                acc += v;
            }
            self.b.grad[co] += acc;
        }
    }

    pub fn zero_grad(&mut self) {
        self.w.zero_grad();
        self.b.zero_grad();
    }
}

//! Dense kernels shared by the tape ops: GEMM and im2col/col2im for 2-D convolutions.

/// `c = a·b + beta·c` for row-major operands. `a` is `m×k` (stored `k×m` when
/// `a_t`), `b` is `k×n` (stored `n×k` when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the strides
    // above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over one spatial plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds a batch `[n, c, h, w]` into columns `[c·k·k, n·oh·ow]`.
pub fn im2col(x: &[f64], batch: usize, g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pos = oh * ow;
    let ncols = batch * pos;
    let plane = g.height * g.width;
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let dst = &mut dst_row[b * pos..(b + 1) * pos];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= g.height as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.width as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[n, c, h, w]`.
pub fn col2im(cols: &[f64], batch: usize, g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pos = oh * ow;
    let ncols = batch * pos;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let dst =
                        &mut x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let src = &src_row[b * pos..(b + 1) * pos];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, p]` → `[c, n·p]`.
pub fn batch_to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p]
                .copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

/// `[c, n·p]` → `[n, c, p]`.
pub fn channel_to_batch_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a stored transposed (3x2), b stored transposed (4x3)
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64)).collect();
        let bt: Vec<f64> = (0..4)
            .flat_map(|j| (0..3).map(move |p| ((p * 4 + j) as f64) * 0.5))
            .collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let n = 2;
        let x: Vec<f64> = (0..n * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ncols = g.col_rows() * n * g.positions();
        let y: Vec<f64> = (0..ncols).map(|i| ((i * 3) % 13) as f64 - 6.0).collect();
        let mut cols = vec![0.0; ncols];
        im2col(&x, n, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, n, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}

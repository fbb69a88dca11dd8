//! im2col/col2im and a row-major GEMM wrapper.

/// `c = a·b + beta·c` for row-major operands; `ta`/`tb` read `a`/`b` transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a square-kernel 2-D window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn conv(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        Window {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox·stride + kx - pad` is in bounds.
fn valid_cols(g: &Window, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.out_w);
    let hi = if g.in_w + g.pad > kx {
        ((g.in_w + g.pad - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds a `C×H×W` image into a `(C·k·k)×(out_h·out_w)` matrix.
pub fn im2col(img: &[f32], g: &Window, col: &mut [f32]) {
    let cols = g.cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(g, kx);
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let x0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps into `img`.
pub fn col2im(col: &[f32], g: &Window, img: &mut [f32]) {
    let cols = g.cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(g, kx);
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let x0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[x0..x0 + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            dst[x0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_for_all_transpose_flags() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let at: Vec<f32> = (0..m * k).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f32> = (0..k * n).map(|i| b[(i % k) * n + i / k]).collect();
        let mut want = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                want[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0f32; m * n];
            gemm(ta, tb, m, n, k, aa, bb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5, "{ta} {tb}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window::conv(2, 5, 5, 3, 2, 1);
        let img: Vec<f32> = (0..2 * 25).map(|i| (i as f32 * 0.7).sin()).collect();
        let y: Vec<f32> = (0..g.rows() * g.cols()).map(|i| (i as f32 * 0.3).cos()).collect();
        let mut col = vec![0.0; g.rows() * g.cols()];
        im2col(&img, &g, &mut col);
        let mut back = vec![0.0; img.len()];
        col2im(&y, &g, &mut back);
        let lhs: f32 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    /// Element-by-element unfold with explicit bounds checks.
    fn naive_im2col(img: &[f32], g: &Window) -> Vec<f32> {
        let mut col = vec![0.0; g.rows() * g.cols()];
        for c in 0..g.channels {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if (0..g.in_h as isize).contains(&iy) && (0..g.in_w as isize).contains(&ix) {
                                col[row * g.cols() + oy * g.out_w + ox] = img[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    #[test]
    fn unfold_matches_naive_reference_across_geometries() {
        for (k, stride, pad, h, w) in [
            (3, 1, 1, 6, 5),
            (3, 2, 1, 7, 6),
            (1, 1, 0, 4, 4),
            (4, 2, 1, 8, 8),
            (3, 2, 2, 5, 3),
            (5, 3, 2, 9, 7),
        ] {
            let g = Window::conv(2, h, w, k, stride, pad);
            let img: Vec<f32> = (0..2 * h * w).map(|i| (i as f32 * 0.7).sin()).collect();
            let mut col = vec![f32::NAN; g.rows() * g.cols()];
            im2col(&img, &g, &mut col);
            assert_eq!(col, naive_im2col(&img, &g), "k{k} s{stride} p{pad}");

            // col2im against the transpose of the naive unfold, one basis vector at a time
            let y: Vec<f32> = (0..g.rows() * g.cols()).map(|i| (i as f32 * 0.3).cos()).collect();
            let mut back = vec![0.0; img.len()];
            col2im(&y, &g, &mut back);
            for (p, b) in back.iter().enumerate() {
                let mut e = vec![0.0; img.len()];
                e[p] = 1.0;
                let want: f32 = naive_im2col(&e, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
                assert!((b - want).abs() < 1e-5, "k{k} s{stride} p{pad} at {p}");
            }
        }
    }
}

//! Raw slice kernels shared by the forward and backward passes.

/// `C = alpha * A·B + beta * C` over strided views.
///
/// `A` is `m×k`, `B` is `k×n`, `C` is `m×n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C view out of bounds");
    if k > 0 {
        assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A view out of bounds");
        assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B view out of bounds");
    }
    // SAFETY: every view was bounds-checked above and `c` does not alias `a`/`b`
    // (it is a distinct `&mut` borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (H'·W')` column matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        // contiguous run with zero fringes
                        let off = kx as isize - g.pad as isize;
                        let lo = (-off).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.width as isize - off).clamp(lo as isize, g.out_w as isize) as usize;
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let start = (lo as isize + off) as usize;
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && (ix as usize) < g.width {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image (accumulating).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let off = kx as isize - g.pad as isize;
                        let lo = (-off).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.width as isize - off).clamp(lo as isize, g.out_w as isize) as usize;
                        let start = (lo as isize + off) as usize;
                        for (d, v) in dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each output position of a permuted tensor, the flat source index.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut result = Vec::with_capacity(n);
    for _ in 0..n {
        result.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &b, (2, 1), &mut c, (2, 1), 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // A^T·B
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, (2, 1), 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            channels: 2,
            height: 4,
            width: 5,
            kh: 3,
            kw: 2,
            stride: 1,
            pad: 1,
            out_h: 4,
            out_w: 6,
        };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_in: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; cols_in.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&cols_in, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_in).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn permute_index_transposes() {
        // 2x3 -> 3x2
        assert_eq!(permute_index(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }
}

//! im2col/col2im convolution kernels on raw slices.
//!
//! Layouts: activations `(n, c, h, w)`, conv weights `(out, in, k, k)`,
//! transposed-conv weights `(in, out, k, k)`. All loops run in a fixed order
//! so results are bit-reproducible.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `(c, h, w)` into a `(c*k*k, out_h*out_w)` matrix.
pub(crate) fn im2col(img: &[Real], g: &Geometry, cols: &mut [Real]) {
    let k = g.kernel;
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back into an image, accumulating overlaps.
pub(crate) fn col2im(cols: &[Real], g: &Geometry, img: &mut [Real]) {
    let k = g.kernel;
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, with optional
/// transposes of the stored operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    a_transposed: bool,
    b: &[Real],
    b_transposed: bool,
    beta: Real,
    c: &mut [Real],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds for the given dimensions.
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

pub(crate) fn conv_out_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn conv_transpose_out_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    ((size - 1) * stride + kernel + output_padding).checked_sub(2 * padding)
}

/// Direct-summation `conv2d` used as a test oracle.
#[cfg(test)]
pub(crate) fn conv2d_naive(
    x: &[Real],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[Real],
    out_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<Real> {
    let oh = conv_out_size(h, k, stride, padding).unwrap();
    let ow = conv_out_size(w, k, stride, padding).unwrap();
    let mut out = vec![0.0; n * out_c * oh * ow];
    for b in 0..n {
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * weight[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * out_c + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out_size(4, 5, 2, 2), Some(2));
        assert_eq!(conv_out_size(64, 5, 2, 2), Some(32));
        assert_eq!(conv_out_size(2, 5, 1, 0), None);
        assert_eq!(conv_transpose_out_size(2, 5, 2, 2, 0), Some(3));
        assert_eq!(conv_transpose_out_size(2, 5, 2, 2, 1), Some(4));
    }
}

//! im2col / col2im kernels for square-kernel 2-D convolutions on one sample.

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
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

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// 1x1, stride 1, no padding: the image already is its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` (`[C, H, W]`) into `col` (`[C*k*k, Ho*Wo]`).
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds `col` back, accumulating into `x` (`[C, H, W]`).
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * wo + ox];
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

    // <im2col(x), c> == <x, col2im(c)> for the adjoint pair.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for &(stride, pad, kernel) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let g = ConvGeom {
                channels: 2,
                height: 5,
                width: 6,
                kernel,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
                .map(|i| ((i * 3 % 13) as f64) * 0.25)
                .collect();
            let mut col = vec![0.0; c.len()];
            im2col(&x, &g, &mut col);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; x.len()];
            col2im(&c, &g, &mut back);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "stride {stride} pad {pad}");
        }
    }
}

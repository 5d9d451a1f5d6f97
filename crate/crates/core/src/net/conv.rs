//! Convolution through input unrolling.
//!
//! Activations of spatial layers are stored as `channels × (N·S)` matrices
//! with column `n·S + s`, where `s = y·W + x` is the flattened spatial index.

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

/// Spatial metadata of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(invalid!("conv geometry has a zero channel, kernel or stride: {self:?}"));
        }
        if self.in_h + 2 * self.padding < self.kernel || self.in_w + 2 * self.padding < self.kernel {
            return Err(invalid!("kernel {} does not fit a padded {}x{} input", self.kernel, self.in_h, self.in_w));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_spatial(&self) -> usize {
        self.in_h * self.in_w
    }

    /// `S_l`, output locations per example.
    pub fn out_spatial(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// `K_l`, kernel positions.
    pub fn kernel_size(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Unrolled-input height `C_{l−1}·K_l`.
    pub fn receptive(&self) -> usize {
        self.in_channels * self.kernel_size()
    }

    /// Source pixel for kernel tap `(ky, kx)` at output `(oy, ox)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some(y as usize * self.in_w + x as usize)
        }
    }
}

fn check_input(input: &Matrix, geom: &ConvGeometry, batch: usize) -> Result<()> {
    geom.validate()?;
    if input.rows() != geom.in_channels || input.cols() != batch * geom.in_spatial() {
        return Err(invalid!(
            "conv input is {}x{}, geometry wants {}x{}",
            input.rows(),
            input.cols(),
            geom.in_channels,
            batch * geom.in_spatial()
        ));
    }
    Ok(())
}

/// Unrolls `input` (`C × N·S_in`) into `(C·K) × (N·S_out)`; column `n·S_out + s`
/// holds the receptive field of output location `s` of example `n`, row
/// `c·K + ky·k + kx`. Out-of-bounds taps (padding) are zero.
pub fn im2col(input: &Matrix, geom: &ConvGeometry, batch: usize) -> Result<Matrix> {
    check_input(input, geom, batch)?;
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let s_out = oh * ow;
    let s_in = geom.in_spatial();
    let k = geom.kernel;
    let mut cols = Matrix::zeros(geom.receptive(), batch * s_out);
    let ncols = cols.cols();
    let out = cols.as_mut_slice();
    for c in 0..geom.in_channels {
        let src = input.row(c);
        for ky in 0..k {
            for kx in 0..k {
                let r = c * k * k + ky * k + kx;
                for n in 0..batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some(p) = geom.source(oy, ox, ky, kx) {
                                out[r * ncols + n * s_out + oy * ow + ox] = src[n * s_in + p];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters unrolled gradients back onto the input.
pub fn col2im(cols: &Matrix, geom: &ConvGeometry, batch: usize) -> Result<Matrix> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let s_out = oh * ow;
    if cols.rows() != geom.receptive() || cols.cols() != batch * s_out {
        return Err(invalid!("col2im input is {}x{}, geometry wants {}x{}", cols.rows(), cols.cols(), geom.receptive(), batch * s_out));
    }
    let s_in = geom.in_spatial();
    let k = geom.kernel;
    let mut img = Matrix::zeros(geom.in_channels, batch * s_in);
    let ncols = cols.cols();
    let src = cols.as_slice();
    for c in 0..geom.in_channels {
        let dst = img.row_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let r = c * k * k + ky * k + kx;
                for n in 0..batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some(p) = geom.source(oy, ox, ky, kx) {
                                dst[n * s_in + p] += src[r * ncols + n * s_out + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(c: usize, h: usize, w: usize, k: usize, stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry { in_channels: c, in_h: h, in_w: w, kernel: k, stride, padding }
    }

    #[test]
    fn one_by_one_kernel_is_identity_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = geom(2, 3, 3, 1, 1, 0);
        let x = Matrix::from_fn(2, 2 * 9, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(im2col(&x, &g, 2).unwrap(), x);
    }

    #[test]
    fn full_kernel_gives_flattened_input() {
        let g = geom(1, 3, 3, 3, 1, 0);
        let x = Matrix::from_fn(1, 9 * 2, |_, j| j as f64);
        let cols = im2col(&x, &g, 2).unwrap();
        assert_eq!(cols.shape(), (9, 2));
        for n in 0..2 {
            for p in 0..9 {
                assert_eq!(cols[(p, n)], (n * 9 + p) as f64);
            }
        }
    }

    #[test]
    fn inconsistent_metadata_rejected() {
        let g = geom(1, 3, 3, 3, 1, 0);
        assert!(im2col(&Matrix::zeros(1, 10), &g, 1).is_err());
        let bad = geom(1, 2, 2, 3, 1, 0);
        assert!(im2col(&Matrix::zeros(1, 4), &bad, 1).is_err());
    }

    fn direct_conv(x: &Matrix, w: &Matrix, g: &ConvGeometry, batch: usize) -> Matrix {
        let (oh, ow) = (g.out_h(), g.out_w());
        let cout = w.rows();
        let mut out = Matrix::zeros(cout, batch * oh * ow);
        for o in 0..cout {
            for n in 0..batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for c in 0..g.in_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let y = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let xx = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if y < 0 || xx < 0 || y >= g.in_h as isize || xx >= g.in_w as isize {
                                        continue;
                                    }
                                    let px = x[(c, n * g.in_spatial() + y as usize * g.in_w + xx as usize)];
                                    s += w[(o, c * g.kernel_size() + ky * g.kernel + kx)] * px;
                                }
                            }
                        }
                        out[(o, n * oh * ow + oy * ow + ox)] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unrolled_product_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let g = geom(2, 5, 4, 3, stride, pad);
            let x = Matrix::from_fn(2, 3 * 20, |_, _| rng.random_range(-1.0..1.0));
            let w = Matrix::from_fn(3, g.receptive(), |_, _| rng.random_range(-1.0..1.0));
            let via = matmul(&w, &im2col(&x, &g, 3).unwrap()).unwrap();
            assert!(via.max_abs_diff(&direct_conv(&x, &w, &g, 3)).unwrap() < 1e-13);
        }
    }

    #[test]
    fn col2im_is_the_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = geom(2, 4, 4, 3, 1, 1);
        let x = Matrix::from_fn(2, 2 * 16, |_, _| rng.random_range(-1.0..1.0));
        let cols = im2col(&x, &g, 2).unwrap();
        let y = Matrix::from_fn(cols.rows(), cols.cols(), |_, _| rng.random_range(-1.0..1.0));
        let lhs = cols.dot(&y).unwrap();
        let rhs = x.dot(&col2im(&y, &g, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

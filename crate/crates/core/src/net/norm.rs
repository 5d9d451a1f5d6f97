//! Batch normalization and batch renormalization over the rows of a
//! `channels × columns` activation matrix.

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Bn,
    Brn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub pop_mean: Vec<f64>,
    /// Population variance (biased).
    pub pop_var: Vec<f64>,
    pub eps: f64,
    pub mode: NormMode,
    pub r_max: f64,
    pub d_max: f64,
    /// Weight of the current batch in the moving average of population statistics.
    pub momentum: f64,
}

/// Values saved by a forward pass for the backward pass and for weight merging.
#[derive(Clone, Debug)]
pub struct NormCache {
    /// Statistics used for normalization: batch statistics in train mode,
    /// population statistics in eval mode.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Matrix,
    /// Renormalization corrections; `1` and `0` for BN and in eval mode.
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    pub batch_stats: bool,
}

impl NormLayer {
    pub fn new(channels: usize, mode: NormMode) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            pop_mean: vec![0.0; channels],
            pop_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            mode,
            r_max: 1.0,
            d_max: 0.0,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-row mean and biased variance.
    pub fn batch_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let m = x.cols() as f64;
        let mut mean = Vec::with_capacity(x.rows());
        let mut var = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / m;
            let v = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            mean.push(mu);
            var.push(v);
        }
        (mean, var)
    }

    /// `r` and `d` of batch renormalization for the given batch moments,
    /// clipped to `[1/r_max, r_max]` and `[-d_max, d_max]`.
    pub fn renorm_corrections(&self, mean: &[f64], var: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r_max = self.r_max.max(1.0);
        let d_max = self.d_max.max(0.0);
        let mut r = Vec::with_capacity(mean.len());
        let mut d = Vec::with_capacity(mean.len());
        for i in 0..mean.len() {
            let pop_std = (self.pop_var[i] + self.eps).sqrt();
            let ri = ((var[i] + self.eps).sqrt() / pop_std).clamp(1.0 / r_max, r_max);
            let di = ((mean[i] - self.pop_mean[i]) / pop_std).clamp(-d_max, d_max);
            r.push(ri);
            d.push(di);
        }
        (r, d)
    }

    pub fn forward(&self, x: &Matrix, train: bool) -> Result<(Matrix, NormCache)> {
        let c = self.channels();
        if x.rows() != c {
            return Err(invalid!("norm layer has {c} channels, input has {} rows", x.rows()));
        }
        if x.cols() == 0 {
            return Err(invalid!("norm layer received an empty batch"));
        }
        let (mean, var, r, d) = if train {
            let (mean, var) = Self::batch_moments(x);
            let (r, d) = match self.mode {
                NormMode::Bn => (vec![1.0; c], vec![0.0; c]),
                NormMode::Brn => self.renorm_corrections(&mean, &var),
            };
            (mean, var, r, d)
        } else {
            (self.pop_mean.clone(), self.pop_var.clone(), vec![1.0; c], vec![0.0; c])
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(c, x.cols());
        let mut y = Matrix::zeros(c, x.cols());
        for i in 0..c {
            let (mu, is) = (mean[i], inv_std[i]);
            let (g, b, ri, di) = (self.gamma[i], self.beta[i], r[i], d[i]);
            let src = x.row(i);
            let xh = xhat.row_mut(i);
            for (dst, &v) in xh.iter_mut().zip(src) {
                *dst = (v - mu) * is;
            }
            let yr = y.row_mut(i);
            for (dst, &v) in yr.iter_mut().zip(xhat.row(i)) {
                *dst = g * (ri * v + di) + b;
            }
        }
        Ok((y, NormCache { mean, var, inv_std, xhat, r, d, batch_stats: train }))
    }

    /// Returns `(dx, dgamma, dbeta)`. With batch statistics the batch-mean and
    /// batch-variance paths are included; `r` and `d` are constants.
    pub fn backward(&self, dy: &Matrix, cache: &NormCache) -> (Matrix, Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let m = dy.cols() as f64;
        let mut dx = Matrix::zeros(c, dy.cols());
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..c {
            let g = dy.row(i);
            let xh = cache.xhat.row(i);
            let (ri, di) = (cache.r[i], cache.d[i]);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (&gv, &xv) in g.iter().zip(xh) {
                sum_g += gv;
                sum_gx += gv * xv;
            }
            dbeta[i] = sum_g;
            dgamma[i] = ri * sum_gx + di * sum_g;
            // upstream gradient on xhat is scale·dy
            let scale = self.gamma[i] * ri;
            let is = cache.inv_std[i];
            let out = dx.row_mut(i);
            if cache.batch_stats {
                let mean_g = scale * sum_g / m;
                let mean_gx = scale * sum_gx / m;
                for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                    *o = is * (scale * gv - mean_g - xv * mean_gx);
                }
            } else {
                for (o, &gv) in out.iter_mut().zip(g) {
                    *o = is * scale * gv;
                }
            }
        }
        (dx, dgamma, dbeta)
    }

    /// Exponential moving average update of the population statistics.
    pub fn update_population(&mut self, cache: &NormCache) {
        if !cache.batch_stats {
            return;
        }
        let m = self.momentum;
        for i in 0..self.channels() {
            self.pop_mean[i] = (1.0 - m) * self.pop_mean[i] + m * cache.mean[i];
            self.pop_var[i] = (1.0 - m) * self.pop_var[i] + m * cache.var[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |i, _| 2.0 * i as f64 + rng.random_range(-1.0..1.0))
    }

    #[test]
    fn train_output_has_beta_mean_and_gamma_variance() {
        let mut bn = NormLayer::new(3, NormMode::Bn);
        bn.gamma = vec![0.5, 2.0, -1.5];
        bn.beta = vec![0.1, -0.3, 2.0];
        let x = random(3, 40, 1);
        let (y, cache) = bn.forward(&x, true).unwrap();
        let (mean, var) = NormLayer::batch_moments(&y);
        for i in 0..3 {
            assert!((mean[i] - bn.beta[i]).abs() < 1e-12);
            // variance is γ²·σ̄²/(σ̄²+ε)
            let want = bn.gamma[i].powi(2) * cache.var[i] / (cache.var[i] + bn.eps);
            assert!((var[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn renorm_equals_bn_when_population_matches_batch() {
        let x = random(4, 16, 2);
        let mut bn = NormLayer::new(4, NormMode::Bn);
        bn.gamma = vec![1.2, 0.7, -0.4, 2.0];
        let (mean, var) = NormLayer::batch_moments(&x);
        bn.pop_mean = mean;
        bn.pop_var = var;
        let mut brn = bn.clone();
        brn.mode = NormMode::Brn;
        brn.r_max = 3.0;
        brn.d_max = 5.0;
        let (y_bn, _) = bn.forward(&x, true).unwrap();
        let (y_brn, cache) = brn.forward(&x, true).unwrap();
        assert!(y_bn.max_abs_diff(&y_brn).unwrap() < 1e-12);
        assert!(cache.r.iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn renorm_corrections_are_clipped() {
        let mut brn = NormLayer::new(1, NormMode::Brn);
        brn.r_max = 2.0;
        brn.d_max = 0.5;
        let (r, d) = brn.renorm_corrections(&[10.0], &[100.0]);
        assert_eq!(r, vec![2.0]);
        assert_eq!(d, vec![0.5]);
    }

    #[test]
    fn population_ema() {
        let x = random(2, 8, 3);
        let mut bn = NormLayer::new(2, NormMode::Bn);
        let (_, cache) = bn.forward(&x, true).unwrap();
        bn.update_population(&cache);
        for i in 0..2 {
            assert!((bn.pop_mean[i] - 0.1 * cache.mean[i]).abs() < 1e-15);
            assert!((bn.pop_var[i] - (0.9 + 0.1 * cache.var[i])).abs() < 1e-15);
        }
    }
}

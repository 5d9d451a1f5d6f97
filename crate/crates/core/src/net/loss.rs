//! Softmax cross-entropy over `classes × N` logit matrices.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

/// Column-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let (k, n) = logits.shape();
    let mut p = Matrix::zeros(k, n);
    for j in 0..n {
        let max = (0..k).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..k {
            let e = (logits[(i, j)] - max).exp();
            p[(i, j)] = e;
            z += e;
        }
        for i in 0..k {
            p[(i, j)] /= z;
        }
    }
    p
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.cols() {
        return Err(invalid!("{} labels for {} examples", labels.len(), logits.cols()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.rows()) {
        return Err(invalid!("label {bad} out of range for {} classes", logits.rows()));
    }
    Ok(())
}

/// Per-example losses `L_n = −log softmax(z_n)[y_n]`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    let k = logits.rows();
    let losses: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let max = (0..k).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|i| (logits[(i, j)] - max).exp()).sum::<f64>().ln();
            lse - logits[(y, j)]
        })
        .collect();
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok(losses)
}

/// `∂L_n/∂z` for every example, stacked as columns: `softmax(z) − onehot(y)`.
pub fn per_example_logit_grads(logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_labels(logits, labels)?;
    let mut g = softmax(logits);
    for (j, &y) in labels.iter().enumerate() {
        g[(y, j)] -= 1.0;
    }
    Ok(g)
}

/// Mean loss `E_n[L_n]` and its gradient with respect to the logits.
pub fn mean_loss_and_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let losses = cross_entropy(logits, labels)?;
    let n = labels.len() as f64;
    let g = per_example_logit_grads(logits, labels)?.scaled(1.0 / n);
    Ok((losses.iter().sum::<f64>() / n, g))
}

pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..logits.rows() {
                if logits[(i, j)] > logits[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    predictions(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Draws one label per example from the model's predictive distribution.
pub fn sample_model_labels<R: Rng + ?Sized>(logits: &Matrix, rng: &mut R) -> Vec<usize> {
    let p = softmax(logits);
    let k = p.rows();
    (0..p.cols())
        .map(|j| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for i in 0..k {
                acc += p[(i, j)];
                if u < acc {
                    return i;
                }
            }
            // u landed in the rounding gap above the last cumulative sum
            (0..k).rev().find(|&i| p[(i, j)] > 0.0).unwrap_or(k - 1)
        })
        .collect()
}

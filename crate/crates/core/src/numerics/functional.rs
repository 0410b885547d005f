//! Tape-free versions of the common activation and loss functions.

use super::tape::{sigmoid as sigmoid_scalar, softmax_in_place};
use super::tensor::Tensor;
use super::NumericsError;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax along `axis` (0: down each column, 1: along each row).
pub fn softmax(logits: &Tensor, axis: usize) -> Tensor {
    match axis {
        0 => softmax(&logits.transpose(), 1).transpose(),
        _ => {
            let c = logits.cols();
            let mut out = logits.clone();
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
            out
        }
    }
}

pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

fn check_distribution(p: &[f64]) -> Result<(), NumericsError> {
    if let Some(&bad) = p.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(NumericsError::InvalidProbability(bad));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(NumericsError::NotNormalized(total));
    }
    Ok(())
}

/// `-ln p[label]`, with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64, NumericsError> {
    if label >= probs.len() {
        return Err(NumericsError::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    if let Some(&bad) = probs.iter().find(|v| **v < 0.0) {
        return Err(NumericsError::InvalidProbability(bad));
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// `KL(p || q)` for two distributions; `q` is floored before the log.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64, NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::Shape(format!("kl_div {} vs {}", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Row-wise layer normalization followed by `gain * x + bias`.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Tensor {
    let c = x.cols();
    assert_eq!(gain.len(), c);
    assert_eq!(bias.len(), c);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[k] + bias[k];
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

//! Softmax cross-entropy and the proxy-NCA loss.

use crate::error::{Error, Result};
use crate::math::{self, norm, squared_distance, Matrix};

/// Tolerance on unit norm for proxy-loss inputs.
pub const PROXY_UNIT_TOL: f64 = 1e-6;

/// Loss value with its gradient w.r.t. the loss input (logits for
/// cross-entropy, the embedding for the proxy loss).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `−ln p[label]` for an explicit probability vector. No gradient.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or(Error::IndexOutOfRange {
        index: label,
        len: probs.len(),
    })?;
    Ok(-p.ln())
}

/// Fused log-softmax cross-entropy. The gradient is `softmax − onehot`.
pub fn cross_entropy_logits(logits: &[f64], label: usize) -> Result<LossValue> {
    if label >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: label,
            len: logits.len(),
        });
    }
    if !math::all_finite(logits) {
        return Err(Error::NonFiniteLoss);
    }
    let lse = log_sum_exp(logits);
    // Clamp tiny negative rounding so the loss stays >= 0.
    let loss = (lse - logits[label]).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok(LossValue { loss, grad })
}

/// Proxy-NCA loss with squared-Euclidean distances and a denominator over
/// every proxy (positives included). `proxies` has one proxy per row.
pub fn nca_proxy_loss(embedding: &[f64], proxies: &Matrix, label: usize) -> Result<LossValue> {
    if label >= proxies.rows() {
        return Err(Error::IndexOutOfRange {
            index: label,
            len: proxies.rows(),
        });
    }
    if embedding.len() != proxies.cols() {
        return Err(Error::DimensionMismatch {
            expected: proxies.cols(),
            actual: embedding.len(),
        });
    }
    for v in std::iter::once(embedding).chain((0..proxies.rows()).map(|r| proxies.row(r))) {
        let n = norm(v);
        if (n - 1.0).abs() > PROXY_UNIT_TOL {
            return Err(Error::DegenerateNorm { norm: n });
        }
    }
    let neg_dist: Vec<f64> = (0..proxies.rows())
        .map(|r| -squared_distance(embedding, proxies.row(r)))
        .collect();
    let lse = log_sum_exp(&neg_dist);
    let loss = lse - neg_dist[label];
    // d/dx = 2 Σ q_c p_c − 2 p_label
    let mut grad = vec![0.0; embedding.len()];
    for (r, nd) in neg_dist.iter().enumerate() {
        let q = (nd - lse).exp();
        math::axpy(2.0 * q, proxies.row(r), &mut grad);
    }
    math::axpy(-2.0, proxies.row(label), &mut grad);
    Ok(LossValue { loss, grad })
}

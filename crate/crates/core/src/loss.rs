//! Expression cross-entropy, the self-constrained focal identity loss, and
//! their sum.
//!
//! The functions here work on row-major probability / logit matrices and are
//! shared by the autodiff graph ops, so a loss computed through the graph and
//! one computed directly are the same bits.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Hyper-parameters of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Scale of the identity term.
    pub alpha: f64,
    /// Focusing exponent of the identity term.
    pub gamma: f64,
    pub num_expressions: usize,
    pub num_identities: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.1, gamma: 15.0, num_expressions: 6, num_identities: 8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha and gamma must be non-negative, got alpha={} gamma={}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

/// A class index together with the number of classes it indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotLabel {
    class_index: usize,
    num_classes: usize,
}

impl OneHotLabel {
    pub fn new(class_index: usize, num_classes: usize) -> Result<Self> {
        if class_index >= num_classes {
            return Err(Error::LabelOutOfRange { label: class_index, num_classes });
        }
        Ok(Self { class_index, num_classes })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn to_vec<T: Real>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.num_classes];
        v[self.class_index] = T::one();
        v
    }
}

/// The constraint factor `alpha * (1 - p)^gamma` applied to the identity term.
pub fn modulating_factor(p: f64, alpha: f64, gamma: f64) -> f64 {
    alpha * (1.0 - p).powf(gamma)
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, k: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {rows}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes: k });
    }
    Ok(())
}

fn floor<T: Real>() -> T {
    T::from_f64(PROB_FLOOR)
}

/// Mean over the batch of `-log p_true`.
pub fn cross_entropy<T: Real>(probs: &[T], k: usize, labels: &[usize]) -> Result<T> {
    let rows = probs.len() / k;
    check_labels(labels, rows, k)?;
    let mut total = T::zero();
    for (row, &t) in probs.chunks_exact(k).zip(labels) {
        total += -row[t].max(floor()).ln();
    }
    Ok(total / T::from_f64(rows as f64))
}

/// Mean over the batch of `alpha * (1 - p_true)^gamma * (-log p_true)`.
///
/// With `alpha = 1, gamma = 0` this returns exactly [`cross_entropy`].
pub fn focal_multiclass<T: Real>(probs: &[T], k: usize, labels: &[usize], alpha: T, gamma: T) -> Result<T> {
    let rows = probs.len() / k;
    check_labels(labels, rows, k)?;
    let mut total = T::zero();
    for (row, &t) in probs.chunks_exact(k).zip(labels) {
        let p = row[t];
        let nll = -p.max(floor()).ln();
        total += alpha * (T::one() - p).powf(gamma) * nll;
    }
    Ok(total / T::from_f64(rows as f64))
}

/// `d/dp` of the per-sample focal term `alpha (1-p)^gamma (-log max(p, floor))`,
/// multiplied by `p` so the result stays finite as `p -> 0`.
fn focal_dp_times_p<T: Real>(p: T, alpha: T, gamma: T) -> T {
    let q = T::one() - p;
    let log_term = if gamma == T::zero() || q == T::zero() {
        T::zero()
    } else {
        gamma * q.powf(gamma - T::one()) * p * p.max(floor()).ln()
    };
    let direct = if p > floor() { q.powf(gamma) } else { T::zero() };
    alpha * (log_term - direct)
}

/// Gradient of [`focal_multiclass`] with respect to the probabilities.
pub(crate) fn focal_grad_probs<T: Real>(probs: &[T], k: usize, labels: &[usize], alpha: T, gamma: T) -> Vec<T> {
    let rows = probs.len() / k;
    let inv_b = T::one() / T::from_f64(rows as f64);
    let mut grad = vec![T::zero(); probs.len()];
    for (r, &t) in labels.iter().enumerate() {
        let p = probs[r * k + t];
        if p > T::zero() {
            grad[r * k + t] = focal_dp_times_p(p, alpha, gamma) / p * inv_b;
        }
    }
    grad
}

/// Gradient of softmax followed by [`focal_multiclass`], with respect to the logits.
pub(crate) fn focal_grad_logits<T: Real>(probs: &[T], k: usize, labels: &[usize], alpha: T, gamma: T) -> Vec<T> {
    let rows = probs.len() / k;
    let inv_b = T::one() / T::from_f64(rows as f64);
    let mut grad = vec![T::zero(); probs.len()];
    for ((row, g), &t) in probs.chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let s = focal_dp_times_p(row[t], alpha, gamma) * inv_b;
        for (j, (gj, &pj)) in g.iter_mut().zip(row).enumerate() {
            let delta = if j == t { T::one() } else { T::zero() };
            *gj = s * (delta - pj);
        }
    }
    grad
}

/// Scalar values of the joint loss, as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLossValue {
    pub total: f64,
    pub l_emo: f64,
    pub l_id: f64,
}

impl JointLossValue {
    pub fn new(l_emo: f64, l_id: f64) -> Self {
        Self { total: l_emo + l_id, l_emo, l_id }
    }
}

/// Joint loss from probability matrices: cross-entropy on expressions plus,
/// when identity predictions are present, the focal identity term.
pub fn joint_loss<T: Real>(
    emo_probs: &[T],
    emo_labels: &[usize],
    identity: Option<(&[T], &[usize])>,
    cfg: &LossConfig,
) -> Result<JointLossValue> {
    let k_emo = cfg.num_expressions;
    let l_emo = cross_entropy(emo_probs, k_emo, emo_labels)?.as_f64();
    let l_id = match identity {
        Some((probs, labels)) => {
            let k_id = cfg.num_identities;
            if probs.len() / k_id != emo_labels.len() {
                return Err(Error::InvalidArgument(format!(
                    "identity batch of {} does not match expression batch of {}",
                    probs.len() / k_id,
                    emo_labels.len()
                )));
            }
            focal_multiclass(probs, k_id, labels, T::from_f64(cfg.alpha), T::from_f64(cfg.gamma))?.as_f64()
        }
        None => 0.0,
    };
    Ok(JointLossValue::new(l_emo, l_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(OneHotLabel::new(6, 6).is_err());
        let l = OneHotLabel::new(2, 4).unwrap();
        assert_eq!(l.to_vec::<f64>(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let probs = [0.0, 1.0, 0.0];
        assert_eq!(cross_entropy(&probs, 3, &[1]).unwrap(), 0.0);
        assert_eq!(focal_multiclass(&probs, 3, &[1], 0.1, 15.0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_six_way_cross_entropy_is_ln6() {
        let probs = [1.0 / 6.0; 12];
        let l: f64 = cross_entropy(&probs, 6, &[0, 5]).unwrap();
        assert!((l - 1.791_759_469_228_055).abs() < 1e-12);
    }

    #[test]
    fn focal_at_half_probability() {
        let l: f64 = focal_multiclass(&[0.5, 0.5], 2, &[0], 0.1, 15.0).unwrap();
        assert!((l - 0.1 * 0.5f64.powi(15) * std::f64::consts::LN_2).abs() < 1e-18);
        assert!((l - 2.1154e-6).abs() < 1e-9);
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2, &[2]),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
        assert!(focal_multiclass(&[0.5, 0.5], 2, &[7], 1.0, 0.0).is_err());
    }

    #[test]
    fn joint_loss_without_identity_equals_expression_term() {
        let cfg = LossConfig { num_expressions: 3, ..Default::default() };
        let v = joint_loss(&[0.2, 0.3, 0.5], &[2], None, &cfg).unwrap();
        assert_eq!(v.total, v.l_emo);
        assert_eq!(v.l_id, 0.0);
    }

    #[test]
    fn joint_loss_rejects_mismatched_batches() {
        let cfg = LossConfig { num_expressions: 2, num_identities: 2, ..Default::default() };
        let r = joint_loss(&[0.5, 0.5, 0.5, 0.5], &[0, 1], Some((&[0.5, 0.5], &[0])), &cfg);
        assert!(r.is_err());
    }

    #[test]
    fn clamp_keeps_loss_finite() {
        let l: f64 = cross_entropy(&[0.0, 1.0], 2, &[0]).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }
}

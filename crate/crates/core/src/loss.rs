//! Training objective: per-sample squared error plus a margin ranking loss
//! over similarity-matched sample pairs, with analytic gradients and a
//! finite-difference checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairing::PairingResult;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the ranking term.
    pub lambda: f64,
    /// Hinge margin.
    pub xi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0, xi: 0.05 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(Error::InvalidArgument(format!("xi must be > 0, got {}", self.xi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets<S> {
    pub predicted: Vec<S>,
    pub actual: Vec<S>,
    pub pairing: PairingResult<S>,
}

impl<S: Scalar> BatchTargets<S> {
    pub fn validate(&self) -> Result<()> {
        if self.predicted.len() != self.actual.len() {
            return Err(Error::LengthMismatch(self.predicted.len(), self.actual.len()));
        }
        if self.predicted.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let n = self.predicted.len();
        let in_range = self.pairing.pairs.iter().all(|&(i, j)| i < n && j < n && i != j);
        if !in_range || self.pairing.leftover.is_some_and(|l| l >= n) {
            return Err(Error::InvalidArgument(format!("pairing indices invalid for batch of {n}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<S> {
    pub total: S,
    pub mse_term: S,
    /// Mean hinge value over pairs (before weighting by lambda).
    pub rank_term: S,
    pub pairs: usize,
}

pub fn mse_loss<S: Scalar>(predicted: &[S], actual: &[S]) -> Result<S> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch(predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(Error::Empty("mse input".into()));
    }
    let sum: S = predicted.iter().zip(actual).map(|(&p, &a)| (p - a) * (p - a)).sum();
    Ok(sum / S::lit(predicted.len() as f64))
}

/// `max(0, (p_i - p_j)(a_j - a_i) + xi)`: zero when the predicted order agrees
/// with the actual order by at least the margin.
pub fn rank_loss_pair<S: Scalar>(pi: S, pj: S, ai: S, aj: S, xi: S) -> Result<S> {
    if ![pi, pj, ai, aj, xi].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rank loss arguments".into()));
    }
    Ok(((pi - pj) * (aj - ai) + xi).max(S::zero()))
}

pub fn compositional_loss<S: Scalar>(batch: &BatchTargets<S>, cfg: &LossConfig) -> Result<LossBreakdown<S>> {
    Ok(loss_and_gradient(batch, cfg, false)?.0)
}

/// Loss and its gradient with respect to `batch.predicted`.
pub fn compositional_gradient<S: Scalar>(batch: &BatchTargets<S>, cfg: &LossConfig) -> Result<(LossBreakdown<S>, Vec<S>)> {
    loss_and_gradient(batch, cfg, true)
}

fn loss_and_gradient<S: Scalar>(
    batch: &BatchTargets<S>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown<S>, Vec<S>)> {
    cfg.validate()?;
    batch.validate()?;
    let (p, a) = (&batch.predicted, &batch.actual);
    let n = S::lit(p.len() as f64);
    let mse_term = mse_loss(p, a)?;
    let lambda = S::lit(cfg.lambda);
    let xi = S::lit(cfg.xi);
    let pairs = &batch.pairing.pairs;

    let mut grad = if want_grad {
        p.iter().zip(a).map(|(&pi, &ai)| S::lit(2.0) * (pi - ai) / n).collect()
    } else {
        Vec::new()
    };
    let mut rank_sum = S::zero();
    let pair_weight = if pairs.is_empty() { S::zero() } else { lambda / S::lit(pairs.len() as f64) };
    for &(i, j) in pairs {
        let v = rank_loss_pair(p[i], p[j], a[i], a[j], xi)?;
        rank_sum += v;
        if want_grad && v > S::zero() {
            let d = a[j] - a[i];
            grad[i] += pair_weight * d;
            grad[j] -= pair_weight * d;
        }
    }
    let rank_term = if pairs.is_empty() { S::zero() } else { rank_sum / S::lit(pairs.len() as f64) };
    let total = if cfg.lambda == 0.0 { mse_term } else { mse_term + lambda * rank_term };
    Ok((LossBreakdown { total, mse_term, rank_term, pairs: pairs.len() }, grad))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<S: Scalar>(f: impl Fn(&[S]) -> S, x: &[S], eps: S) -> Vec<S> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + eps;
            let up = f(&probe);
            probe[k] = x[k] - eps;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (S::lit(2.0) * eps)
        })
        .collect()
}

/// Largest per-coordinate `|a - b| / max(|a|, |b|)`; coordinates where both
/// are below `1e-12` count as exact.
pub fn max_relative_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> S {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| {
            let scale = a.abs().max(b.abs());
            if scale < S::lit(1e-12) {
                S::zero()
            } else {
                (a - b).abs() / scale
            }
        })
        .fold(S::zero(), S::max)
}

/// Compares an analytic gradient against central differences of `loss`.
pub fn grad_check<S: Scalar>(loss: impl Fn(&[S]) -> S, analytic: &[S], point: &[S], eps: S) -> S {
    max_relative_error(analytic, &finite_difference_gradient(loss, point, eps))
}

/// Gradient check of [`compositional_loss`] with respect to the predictions.
///
/// Refuses points where a pair's hinge argument lies within `10 * eps` of
/// its kink, where central differences are meaningless.
pub fn grad_check_compositional<S: Scalar>(batch: &BatchTargets<S>, cfg: &LossConfig, eps: S) -> Result<S> {
    let xi = S::lit(cfg.xi);
    let (p, a) = (&batch.predicted, &batch.actual);
    for &(i, j) in &batch.pairing.pairs {
        let arg = (p[i] - p[j]) * (a[j] - a[i]) + xi;
        if arg.abs() <= S::lit(10.0) * eps {
            return Err(Error::NearKink { i, j, distance: arg.abs().as_f64() });
        }
    }
    let (_, analytic) = compositional_gradient(batch, cfg)?;
    let f = |x: &[S]| {
        let probe = BatchTargets { predicted: x.to_vec(), actual: a.clone(), pairing: batch.pairing.clone() };
        compositional_loss(&probe, cfg).map(|b| b.total).unwrap_or(S::nan())
    };
    Ok(grad_check(f, &analytic, p, eps))
}

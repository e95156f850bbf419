//! Softmax cross-entropy and the equilibrium loss.
//!
//! Both losses are evaluated in margin form,
//!
//! ```text
//! L(z, y) = log[1 + sum_{y' != y} exp(z_{y'} - z_y + delta_{yy'})],
//! delta_{yy'} = ln s_{y'} - ln s_y,
//! ```
//!
//! with `delta = 0` for plain cross-entropy. Equal scores therefore produce
//! exactly zero margins and the two losses agree bit for bit. Since the margin
//! only shifts every logit by `ln s`, the gradient is
//! `softmax(z + ln s) - onehot(y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_tracker::MeanScoreVector;

/// Loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// How per-instance losses combine over a mini-batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    /// Scale applied to each instance's loss and gradient for a batch of `n`.
    pub fn weight(self, n: usize) -> f64 {
        match self {
            Reduction::Mean if n > 0 => 1.0 / n as f64,
            _ => 1.0,
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn check_inputs(z: &[f64], y: usize) -> Result<()> {
    if y >= z.len() {
        return Err(Error::ClassOutOfRange {
            index: y,
            num_classes: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

/// `log[1 + sum exp(a_{y'})]` over the relative logits `a` (with `a_y = 0`),
/// plus the gradient `softmax(a) - onehot(y)`.
fn margin_form(relative: Vec<f64>, y: usize) -> LossResult {
    let (arg_max, max) = relative
        .iter()
        .copied()
        .enumerate()
        .fold((y, 0.0), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    let mut gradient: Vec<f64> = relative.iter().map(|&a| (a - max).exp()).collect();
    let rest: f64 = gradient
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg_max)
        .map(|(_, &e)| e)
        .sum();
    let loss = max + rest.ln_1p();
    let norm = 1.0 + rest;
    for g in &mut gradient {
        *g /= norm;
    }
    gradient[y] -= 1.0;
    LossResult { loss, gradient }
}

/// Standard softmax cross-entropy.
pub fn softmax_ce(z: &[f64], y: usize) -> Result<LossResult> {
    check_inputs(z, y)?;
    let zy = z[y];
    let relative = z.iter().map(|&v| v - zy + 0.0).collect();
    Ok(margin_form(relative, y))
}

/// Pairwise score margin `ln(s_{y'} / s_y)`. The background index reads the
/// tracker's substitute value.
pub fn margin(s: &MeanScoreVector, y: usize, y_prime: usize) -> Result<f64> {
    Ok(s.get(y_prime)?.ln() - s.get(y)?.ln())
}

fn margin_from_logs(log_s: &[f64], y: usize, y_prime: usize) -> f64 {
    log_s[y_prime] - log_s[y]
}

/// Equilibrium loss: cross-entropy with score-guided pairwise margins.
pub fn equilibrium_loss(z: &[f64], y: usize, s: &MeanScoreVector) -> Result<LossResult> {
    check_inputs(z, y)?;
    if z.len() != s.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: s.num_classes(),
            actual: z.len(),
        });
    }
    Ok(equilibrium_loss_with_logs(z, y, &s.log_scores()))
}

/// Same as [`equilibrium_loss`] with `ln s` precomputed; used in the batch
/// loop. Inputs are assumed validated.
pub(crate) fn equilibrium_loss_with_logs(z: &[f64], y: usize, log_s: &[f64]) -> LossResult {
    let zy = z[y];
    let relative = z
        .iter()
        .enumerate()
        .map(|(j, &v)| v - zy + margin_from_logs(log_s, y, j))
        .collect();
    margin_form(relative, y)
}

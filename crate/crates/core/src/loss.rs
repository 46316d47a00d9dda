//! Contrastive objective with exponential negative hardening and trainable
//! temperature, plus the additive angular margin softmax baseline.
//!
//! For anchor `i` with positives `P_i` and negatives `N_i` (hard or not):
//!
//! ```text
//! L = sum_i -1/|P_i| sum_{p in P_i} log( e^{s_ip/t} / (e^{s_ip/t} + sum_{n in N_i} e^{b s_in} e^{s_in/t}) )
//! ```
//!
//! `b = 0` gives the plain supervised contrastive loss. The denominator holds
//! the current positive and the negatives only; other positives of the same
//! anchor are left out.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{PairLabel, PairLabelMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Hardening exponent; 0 disables hardening.
    pub beta: f64,
    pub tau_init: f64,
    pub tau_trainable: bool,
    /// Lower clamp for the temperature.
    pub tau_min: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            beta: 0.0,
            tau_init: 0.1,
            tau_trainable: true,
            tau_min: 1e-3,
        }
    }
}

impl ContrastiveConfig {
    pub fn supcon() -> Self {
        Self::default()
    }

    pub fn hscl() -> Self {
        Self {
            beta: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if !(self.tau_min > 0.0 && self.tau_init > self.tau_min) {
            return Err(Error::InvalidConfig(format!(
                "need tau_init > tau_min > 0, got {} and {}",
                self.tau_init, self.tau_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `dL/dS[i][j]`, treating every entry of `S` as an independent input.
    pub grad_similarity: Array2<f64>,
    /// `dL/d(log tau)`; zero when the temperature is frozen.
    pub grad_log_tau: f64,
}

/// Negative weight `H = exp(beta * s)`.
pub fn hardening_weight(s: f64, beta: f64) -> f64 {
    (beta * s).exp()
}

fn check_inputs(s: &Array2<f64>, labels: &PairLabelMatrix, tau: f64) -> Result<()> {
    let n = labels.n();
    if s.nrows() != n {
        return Err(Error::dim(n, s.nrows()));
    }
    if s.ncols() != n {
        return Err(Error::dim(n, s.ncols()));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::NonFinite("temperature"));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("similarity matrix"));
    }
    Ok(())
}

/// Loss value and exact gradients. Exponents are shifted by their row
/// maximum before exponentiation.
pub fn contrastive_loss(
    s: &Array2<f64>,
    labels: &PairLabelMatrix,
    cfg: &ContrastiveConfig,
    tau: f64,
) -> Result<LossOutput> {
    check_inputs(s, labels, tau)?;
    let n = labels.n();
    let inv_tau = 1.0 / tau;
    let neg_scale = inv_tau + cfg.beta;
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, n));
    let mut grad_log_tau = 0.0;

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..n {
        positives.clear();
        negatives.clear();
        for (j, l) in labels.row(i).iter().enumerate() {
            match l {
                PairLabel::Positive => positives.push(j),
                l if l.is_negative() => negatives.push(j),
                _ => {}
            }
        }
        if positives.is_empty() {
            return Err(Error::NoPositive(i));
        }
        // log(H e^{s/t}) = s (1/t + beta)
        let neg_max = negatives
            .iter()
            .map(|&j| s[[i, j]] * neg_scale)
            .fold(f64::NEG_INFINITY, f64::max);
        let neg_sum: f64 = negatives
            .iter()
            .map(|&j| (s[[i, j]] * neg_scale - neg_max).exp())
            .sum();
        let inv_p = 1.0 / positives.len() as f64;

        for &p in &positives {
            let a = s[[i, p]] * inv_tau;
            let m = a.max(neg_max);
            let z = (a - m).exp() + if negatives.is_empty() { 0.0 } else { (neg_max - m).exp() * neg_sum };
            let log_z = m + z.ln();
            value += (log_z - a) * inv_p;

            let w_pos = (a - log_z).exp();
            grad[[i, p]] += (w_pos - 1.0) * inv_tau * inv_p;
            let mut tau_term = (w_pos - 1.0) * s[[i, p]];
            for &j in &negatives {
                let w = (s[[i, j]] * neg_scale - log_z).exp();
                grad[[i, j]] += w * neg_scale * inv_p;
                tau_term += w * s[[i, j]];
            }
            grad_log_tau -= inv_tau * tau_term * inv_p;
        }
    }

    if !value.is_finite() {
        return Err(Error::NonFinite("loss value"));
    }
    Ok(LossOutput {
        value,
        grad_similarity: grad,
        grad_log_tau: if cfg.tau_trainable { grad_log_tau } else { 0.0 },
    })
}

/// Relative deviation with a unit floor on the scale, so gradients near
/// zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central finite differences over every entry of `S` and over `log tau`;
/// returns the largest [`relative_error`] against the analytic gradients.
pub fn contrastive_loss_grad_check(
    s: &Array2<f64>,
    labels: &PairLabelMatrix,
    cfg: &ContrastiveConfig,
    tau: f64,
    h: f64,
) -> Result<f64> {
    let out = contrastive_loss(s, labels, cfg, tau)?;
    let mut worst: f64 = 0.0;
    let mut probe = s.clone();
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            let orig = probe[[i, j]];
            probe[[i, j]] = orig + h;
            let up = contrastive_loss(&probe, labels, cfg, tau)?.value;
            probe[[i, j]] = orig - h;
            let down = contrastive_loss(&probe, labels, cfg, tau)?.value;
            probe[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(out.grad_similarity[[i, j]], numeric));
        }
    }
    if cfg.tau_trainable {
        let log_tau = tau.ln();
        let up = contrastive_loss(s, labels, cfg, (log_tau + h).exp())?.value;
        let down = contrastive_loss(s, labels, cfg, (log_tau - h).exp())?.value;
        worst = worst.max(relative_error(out.grad_log_tau, (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Maps `dL/dS` for `S = E E^T` back to `dL/dE = (G + G^T) E`.
pub fn similarity_grad_to_embeddings(grad_s: &Array2<f64>, embeddings: &Array2<f64>) -> Array2<f64> {
    let sym = grad_s + &grad_s.t();
    sym.dot(embeddings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AamOutput {
    /// Mean cross-entropy over the batch.
    pub value: f64,
    pub grad_embeddings: Array2<f64>,
    pub grad_weights: Array2<f64>,
}

/// `cos(theta + m)` for `cos(theta) = c`, with the usual linear fallback
/// `c - m sin(m)` once `theta > pi - m`. Returns the value and `d/dc`.
fn angular_margin(c: f64, margin: f64) -> (f64, f64) {
    let (sin_m, cos_m) = margin.sin_cos();
    let threshold = (std::f64::consts::PI - margin).cos();
    if c > threshold {
        let sin_t = (1.0 - c * c).clamp(0.0, 1.0).sqrt();
        let value = c * cos_m - sin_t * sin_m;
        // derivative blows up at |c| = 1; floor sin(theta)
        let deriv = cos_m + c * sin_m / sin_t.max(1e-12);
        (value, deriv)
    } else {
        (c - margin * sin_m, 1.0)
    }
}

/// Additive angular margin softmax over cosine logits `embeddings . weights`.
/// Inputs are expected unit-norm; gradients are taken with respect to the
/// given vectors.
pub fn aam_softmax_loss(
    embeddings: &Array2<f64>,
    weights: &Array2<f64>,
    targets: &[usize],
    cfg: &AamConfig,
) -> Result<AamOutput> {
    let (batch, dim) = embeddings.dim();
    let classes = weights.nrows();
    if weights.ncols() != dim {
        return Err(Error::dim(dim, weights.ncols()));
    }
    if targets.len() != batch {
        return Err(Error::dim(batch, targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::InvalidTarget { target: t, classes });
    }
    if embeddings.iter().chain(weights.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("aam-softmax input"));
    }

    let cos = embeddings.dot(&weights.t());
    let mut grad_cos = Array2::zeros((batch, classes));
    let mut value = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (b, &t) in targets.iter().enumerate() {
        let (phi, dphi) = angular_margin(cos[[b, t]], cfg.margin);
        let logits: Vec<f64> = (0..classes)
            .map(|j| cfg.scale * if j == t { phi } else { cos[[b, j]] })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        value += (log_z - logits[t]) * inv_b;
        for j in 0..classes {
            let p = (logits[j] - log_z).exp();
            grad_cos[[b, j]] = if j == t {
                cfg.scale * (p - 1.0) * dphi * inv_b
            } else {
                cfg.scale * p * inv_b
            };
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("aam-softmax loss"));
    }
    Ok(AamOutput {
        value,
        grad_embeddings: grad_cos.dot(weights),
        grad_weights: grad_cos.t().dot(embeddings),
    })
}

/// Rows normalized to unit length.
pub(crate) fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = m.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(norms) {
        row /= n;
    }
    out
}

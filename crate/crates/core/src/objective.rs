//! Loss arithmetic: group-relative advantages, the clipped surrogate, the
//! k3 KL estimator, the relevance-reweighted policy loss, the attention
//! penalty branch, and their weighted total.
//!
//! These are value-level reference functions. The trainer rebuilds the same
//! arithmetic on the autodiff tape for gradients; tests pin the two routes
//! together.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Thresholds and stabilizers for the attention branch and surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Accuracy at or below this fires the task-failure gate.
    pub theta_fail: f64,
    /// Soft-gate floor applied to successful completions.
    pub alpha_floor: f64,
    /// Cap on the per-completion attention prefactor.
    pub c_pref: f64,
    /// Stabilizer inside -log(a_t + eps).
    pub eps_log: f64,
    /// Stabilizer added to the advantage denominator.
    pub eps_std: f64,
    /// Surrogate clip ratio.
    pub eps_clip: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            theta_fail: 0.5,
            alpha_floor: 0.1,
            c_pref: 3.0,
            eps_log: 0.1,
            eps_std: 0.1,
            eps_clip: 0.2,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_floor) {
            return Err(Error::Config("alpha_floor must be in [0, 1]".into()));
        }
        if self.c_pref < 0.0 || self.eps_log < 0.0 || self.eps_std < 0.0 || self.theta_fail < 0.0
        {
            return Err(Error::Config("gate constants must be >= 0".into()));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(Error::Config("eps_clip must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Group-relative advantages: reward standardized by the group mean and
/// population standard deviation, stabilized by `eps_std`.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::Config(format!(
            "advantage normalization needs a group of >= 2, got {g}"
        )));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps_std)).collect())
}

/// Per-token clipped surrogate losses:
/// `-min(rho_t * adv, clip(rho_t, 1-eps, 1+eps) * adv)` with
/// `rho_t = exp(logp_new - logp_old)`.
pub fn clipped_surrogate_series(
    logp_new: &[f64],
    logp_old: &[f64],
    adv: f64,
    eps_clip: f64,
) -> Result<Vec<f64>> {
    if logp_new.len() != logp_old.len() {
        return Err(Error::LengthMismatch {
            context: "clipped_surrogate_series",
            left: logp_new.len(),
            right: logp_old.len(),
        });
    }
    Ok(logp_new
        .iter()
        .zip(logp_old)
        .map(|(new, old)| {
            let rho = (new - old).exp();
            let clipped = rho.clamp(1.0 - eps_clip, 1.0 + eps_clip);
            -(rho * adv).min(clipped * adv)
        })
        .collect())
}

/// Relevance-weighted policy loss over a group: each completion contributes
/// its mask-weighted token mean, normalized by the mask sum so the loss is
/// invariant to the mask's overall scale; completions average with weight
/// 1/G. Empty completions are skipped by passing empty slices.
pub fn reweighted_policy_loss(
    token_losses: &[Vec<f64>],
    omega: &[Vec<f64>],
    group_size: usize,
) -> Result<f64> {
    if token_losses.len() != omega.len() {
        return Err(Error::LengthMismatch {
            context: "reweighted_policy_loss arity",
            left: token_losses.len(),
            right: omega.len(),
        });
    }
    let mut total = 0.0;
    for (losses, w) in token_losses.iter().zip(omega) {
        if losses.len() != w.len() {
            return Err(Error::LengthMismatch {
                context: "reweighted_policy_loss tokens",
                left: losses.len(),
                right: w.len(),
            });
        }
        if losses.is_empty() {
            continue;
        }
        let denom: f64 = w.iter().sum();
        if denom <= 0.0 {
            return Err(Error::Numeric("zero mask sum in policy loss".into()));
        }
        let num: f64 = losses.iter().zip(w).map(|(l, wi)| l * wi).sum();
        total += num / denom;
    }
    Ok(total / group_size as f64)
}

/// Per-completion k3 KL estimate: mean over tokens of
/// `exp(delta) - delta - 1`, `delta = logp_ref - logp_policy`. Nonnegative,
/// zero exactly at equality.
pub fn kl_k3_loss(logp_ref: &[f64], logp_policy: &[f64]) -> Result<f64> {
    if logp_ref.len() != logp_policy.len() {
        return Err(Error::LengthMismatch {
            context: "kl_k3_loss",
            left: logp_ref.len(),
            right: logp_policy.len(),
        });
    }
    if logp_ref.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logp_ref
        .iter()
        .zip(logp_policy)
        .map(|(r, p)| {
            let delta = r - p;
            delta.exp() - delta - 1.0
        })
        .sum();
    Ok(sum / logp_ref.len() as f64)
}

/// Soft task-failure gate: 1 when accuracy is at or below the threshold,
/// else the floor.
pub fn failure_gate(r_acc: f64, theta_fail: f64, alpha_floor: f64) -> f64 {
    if r_acc <= theta_fail {
        1.0
    } else {
        alpha_floor
    }
}

/// Inputs for one completion's attention-branch term. All fields are
/// detached values; gradients flow only through the live attention mass.
#[derive(Debug, Clone)]
pub struct AttnBranchTerm {
    /// Audio attention mass series a_t.
    pub mass: Vec<f64>,
    /// Inverse relevance weights (zero off the POS gate).
    pub nu: Vec<f64>,
    /// Temporal ramp (t/T)^kappa.
    pub temporal: Vec<f64>,
    pub advantage: f64,
    pub gate: f64,
    pub n_pos: usize,
}

impl AttnBranchTerm {
    /// `min(gate * |adv|, c_pref)`.
    pub fn prefactor(&self, c_pref: f64) -> f64 {
        (self.gate * self.advantage.abs()).min(c_pref)
    }

    /// Weighted token mean of `-log(a_t + eps)`, before the prefactor.
    pub fn inner_mean(&self, eps_log: f64) -> f64 {
        if self.n_pos == 0 {
            return 0.0;
        }
        let sum: f64 = self
            .mass
            .iter()
            .zip(&self.nu)
            .zip(&self.temporal)
            .map(|((a, nu), w)| w * nu * -(a + eps_log).ln())
            .sum();
        sum / self.n_pos as f64
    }
}

/// Attention penalty over a group: each completion contributes its gated,
/// advantage-scaled, capped prefactor times the POS-normalized weighted
/// mean of `-log(a_t + eps_log)`. Completions with no gated tokens
/// contribute zero.
pub fn attention_branch_loss(
    terms: &[AttnBranchTerm],
    group_size: usize,
    c_pref: f64,
    eps_log: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for term in terms {
        if term.mass.len() != term.nu.len() || term.mass.len() != term.temporal.len() {
            return Err(Error::LengthMismatch {
                context: "attention_branch_loss",
                left: term.mass.len(),
                right: term.nu.len().max(term.temporal.len()),
            });
        }
        if term.mass.iter().any(|a| a + eps_log <= 0.0) {
            return Err(Error::Numeric("log argument a_t + eps <= 0".into()));
        }
        total += term.prefactor(c_pref) * term.inner_mean(eps_log);
    }
    Ok(total / group_size as f64)
}

/// Weighted total: policy branch + beta * KL + eta * attention branch.
pub fn total_objective(l_pg: f64, l_kl: f64, l_attn: f64, beta: f64, eta: f64) -> f64 {
    l_pg + beta * l_kl + eta * l_attn
}

/// Scalar components of one optimization step, plus per-completion detail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pg: f64,
    pub kl: f64,
    pub attn: f64,
    pub total: f64,
    pub advantages: Vec<f64>,
    /// Per-completion per-token surrogate losses.
    pub surrogates: Vec<Vec<f64>>,
    /// Per-completion attention prefactors actually used.
    pub prefactors: Vec<f64>,
}

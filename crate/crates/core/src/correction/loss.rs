//! Surrogate objectives: PPO clipping, importance weights, distillation and
//! group-normalized advantages. Objectives are maximized.

use std::collections::BTreeMap;

use super::{batch_weights_with_z, batch_z_approx, JackpotConfig, TokenRecord, TokenWeights};
use crate::categorical::{clamped_ratio, kl_divergence, Categorical};
use crate::error::{check_finite, Error, Result};
use crate::z_estimator::BatchCalibration;

pub(crate) fn check_tis_c(c: f64) -> Result<()> {
    if c >= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "tis_c",
            value: c,
            reason: "truncation constant must be at least 1",
        })
    }
}

/// Truncated importance weight `min(p_ref / p_inf, C)`.
pub fn tis_weight(logp_ref: f64, logp_inf: f64, c: f64) -> Result<f64> {
    check_finite("log-probs", &[logp_ref, logp_inf])?;
    check_tis_c(c)?;
    Ok(clamped_ratio(logp_ref, logp_inf).min(c))
}

/// `min(p_new / p_inf, C)` with `p_new` detached. Pair it with a PPO ratio
/// taken against the same detached `p_new`.
pub fn tis_adjusted_weight(logp_new_detached: f64, logp_inf: f64, c: f64) -> Result<f64> {
    tis_weight(logp_new_detached, logp_inf, c)
}

/// Shape applied to a raw importance ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjustFn {
    Identity,
    /// `min(x, c)`.
    Truncated { c: f64 },
    /// `x` inside `[lo, hi]`, otherwise 0.
    BiTruncation { lo: f64, hi: f64 },
}

impl AdjustFn {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            AdjustFn::Identity => x,
            AdjustFn::Truncated { c } => x.min(c),
            AdjustFn::BiTruncation { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    x
                } else {
                    0.0
                }
            }
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "ratio",
            value: ratio,
            reason: "must be positive and finite",
        })
    }
}

/// `min(r·A, clip(r, 1-ε_low, 1+ε_high)·A)`.
pub fn ppo_clip_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> Result<f64> {
    check_ratio(ratio)?;
    Ok(clip_term(ratio, advantage, eps_low, eps_high))
}

fn clip_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high) * advantage;
    unclipped.min(clipped)
}

/// Derivative of [`ppo_clip_term`] with respect to `ln r`.
fn clip_term_dlogr(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high) * advantage;
    if unclipped <= clipped {
        unclipped
    } else {
        0.0
    }
}

/// What the masked objective is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// Tokens with mask 1.
    #[default]
    Survivors,
    AllTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub tis_c: f64,
    pub lambda_distill: f64,
    pub denominator: Denominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            tis_c: 2.0,
            lambda_distill: 1.0,
            denominator: Denominator::Survivors,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_low", self.eps_low), ("eps_high", self.eps_high)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter {
                    name,
                    value: v,
                    reason: "clip radius must lie in (0, 1)",
                });
            }
        }
        check_tis_c(self.tis_c)?;
        if !(self.lambda_distill >= 0.0 && self.lambda_distill.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "lambda_distill",
                value: self.lambda_distill,
                reason: "must be non-negative and finite",
            });
        }
        Ok(())
    }
}

/// A weighted clipped objective and its gradient with respect to the
/// current log-probs. Weights and masks are constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipObjective {
    pub objective: f64,
    pub grad_logp: Vec<f64>,
    pub survivors: usize,
}

/// `Σ mask·weight·clip_term(exp(logp - logp_old), A) / denominator`.
pub fn weighted_clip_objective(
    current_logp: &[f64],
    old_logp: &[f64],
    advantages: &[f64],
    weights: &[f64],
    mask: &[u8],
    lcfg: &LossConfig,
) -> Result<ClipObjective> {
    let n = current_logp.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    for (what, len) in [
        ("old_logp", old_logp.len()),
        ("advantages", advantages.len()),
        ("weights", weights.len()),
        ("mask", mask.len()),
    ] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                expected: n,
                got: len,
            });
        }
    }
    check_finite("current log-probs", current_logp)?;
    let survivors = mask.iter().filter(|&&m| m == 1).count();
    let denom = match lcfg.denominator {
        Denominator::Survivors => survivors,
        Denominator::AllTokens => n,
    };
    if survivors == 0 {
        return Err(Error::AllMasked);
    }
    let scale = 1.0 / denom as f64;
    let mut total = 0.0;
    let mut grad_logp = vec![0.0; n];
    for i in 0..n {
        if mask[i] == 0 {
            continue;
        }
        let ratio = (current_logp[i] - old_logp[i]).exp();
        check_ratio(ratio)?;
        total += weights[i] * clip_term(ratio, advantages[i], lcfg.eps_low, lcfg.eps_high);
        grad_logp[i] =
            weights[i] * clip_term_dlogr(ratio, advantages[i], lcfg.eps_low, lcfg.eps_high) * scale;
    }
    Ok(ClipObjective {
        objective: total * scale,
        grad_logp,
        survivors,
    })
}

/// Plain PPO objective with the ratio taken against `logp_ref`.
pub fn ppo_loss(batch: &[TokenRecord], current_logp: &[f64], lcfg: &LossConfig) -> Result<ClipObjective> {
    lcfg.validate()?;
    let old: Vec<f64> = batch.iter().map(|r| r.logp_ref).collect();
    let adv: Vec<f64> = batch.iter().map(|r| r.advantage).collect();
    let ones = vec![1.0; batch.len()];
    let mask = vec![1u8; batch.len()];
    weighted_clip_objective(current_logp, &old, &adv, &ones, &mask, lcfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoObrsOutput {
    pub objective: f64,
    pub weights: Vec<TokenWeights>,
    pub calibration: BatchCalibration,
    pub survivors: usize,
    /// Gradient of the objective with respect to `current_logp`, with masks
    /// and `ρ` held fixed.
    pub grad_logp: Vec<f64>,
}

/// OBRS-aware PPO objective with normalizers estimated from the records'
/// top-k lists.
pub fn ppo_obrs_loss(
    batch: &[TokenRecord],
    current_logp: &[f64],
    cfg: &JackpotConfig,
    lcfg: &LossConfig,
) -> Result<PpoObrsOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let z = batch_z_approx(batch, cfg)?;
    ppo_obrs_loss_with_z(batch, &z, current_logp, cfg, lcfg)
}

/// As [`ppo_obrs_loss`] with caller-supplied per-token normalizers.
pub fn ppo_obrs_loss_with_z(
    batch: &[TokenRecord],
    z_approx: &[f64],
    current_logp: &[f64],
    cfg: &JackpotConfig,
    lcfg: &LossConfig,
) -> Result<PpoObrsOutput> {
    lcfg.validate()?;
    if current_logp.len() != batch.len() {
        return Err(Error::LengthMismatch {
            what: "current_logp",
            expected: batch.len(),
            got: current_logp.len(),
        });
    }
    let bw = batch_weights_with_z(batch, z_approx, cfg, lcfg.tis_c)?;
    let old: Vec<f64> = batch.iter().map(|r| r.logp_ref).collect();
    let adv: Vec<f64> = batch.iter().map(|r| r.advantage).collect();
    let rho: Vec<f64> = bw.weights.iter().map(|w| w.rho).collect();
    let mask: Vec<u8> = bw.weights.iter().map(|w| w.mask).collect();
    let clip = weighted_clip_objective(current_logp, &old, &adv, &rho, &mask, lcfg)?;
    Ok(PpoObrsOutput {
        objective: clip.objective,
        weights: bw.weights,
        calibration: bw.calibration,
        survivors: clip.survivors,
        grad_logp: clip.grad_logp,
    })
}

/// Forward KL `KL(p_new ‖ p_omega)` with `p_new` frozen.
pub fn distill_loss(p_new: &Categorical, p_omega: &Categorical) -> Result<f64> {
    kl_divergence(p_new, p_omega)
}

/// Gradient of [`distill_loss`] with respect to the logits of `p_omega`:
/// `softmax(ω) - p_new`.
pub fn distill_grad_logits(p_new: &Categorical, p_omega: &Categorical) -> Result<Vec<f64>> {
    same_vocab(p_new, p_omega)?;
    Ok(p_omega
        .probs()
        .iter()
        .zip(p_new.probs())
        .map(|(o, n)| o - n)
        .collect())
}

/// Reverse KL `KL(p_omega ‖ p_new)` with `p_new` frozen.
pub fn reverse_kl_loss(p_new: &Categorical, p_omega: &Categorical) -> Result<f64> {
    kl_divergence(p_omega, p_new)
}

/// Gradient of [`reverse_kl_loss`] with respect to the logits of `p_omega`:
/// `p_ω,j · (ln(p_ω,j / p_new,j) - KL)`.
pub fn reverse_kl_grad_logits(p_new: &Categorical, p_omega: &Categorical) -> Result<Vec<f64>> {
    let kl = reverse_kl_loss(p_new, p_omega)?;
    Ok(p_omega
        .log_probs()
        .iter()
        .zip(p_new.log_probs())
        .map(|(&lo, &ln)| {
            if lo == f64::NEG_INFINITY {
                0.0
            } else {
                lo.exp() * (lo - ln - kl)
            }
        })
        .collect())
}

fn same_vocab(a: &Categorical, b: &Categorical) -> Result<()> {
    if a.vocab_size() != b.vocab_size() {
        return Err(Error::VocabMismatch {
            left: a.vocab_size(),
            right: b.vocab_size(),
        });
    }
    Ok(())
}

/// Group-normalized advantages `(r - mean) / max(std, 1e-6)` using the
/// population standard deviation of each group.
pub fn grpo_advantages(rewards: &[f64], group_ids: &[u64]) -> Result<Vec<f64>> {
    if rewards.len() != group_ids.len() {
        return Err(Error::LengthMismatch {
            what: "group_ids",
            expected: rewards.len(),
            got: group_ids.len(),
        });
    }
    if rewards.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_finite("rewards", rewards)?;
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &g) in group_ids.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    let mut adv = vec![0.0; rewards.len()];
    for (&g, members) in &groups {
        if members.len() < 2 {
            return Err(Error::GroupTooSmall {
                group: g as usize,
                size: members.len(),
            });
        }
        let n = members.len() as f64;
        let mean = members.iter().map(|&i| rewards[i]).sum::<f64>() / n;
        let var = members.iter().map(|&i| (rewards[i] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-6);
        for &i in members {
            adv[i] = (rewards[i] - mean) / std;
        }
    }
    Ok(adv)
}

/// `policy + rollout + λ_distill · distill`.
pub fn joint_objective(policy_loss: f64, rollout_loss: f64, distill: f64, lcfg: &LossConfig) -> Result<f64> {
    check_finite("objective terms", &[policy_loss, rollout_loss, distill])?;
    Ok(policy_loss + rollout_loss + lcfg.lambda_distill * distill)
}

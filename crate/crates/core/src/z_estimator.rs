//! Normalizer estimation from top-k side information and batch calibration.
//!
//! Only the top-k log-probs of the inference and target policies are stored
//! per token, so `Z` is approximated on the union of both lists. The estimate
//! never exceeds the true `Z`; a per-batch factor `κ = α̂ / mean(Z_approx)`
//! removes the shrinkage using the observed acceptance rate `α̂`.

use std::collections::BTreeSet;

use crate::categorical::{top_k, Categorical, SparseTopK};
use crate::error::{Error, Result};
use crate::obrs::{acceptance_rate, ObrsParams};

pub const KAPPA_MIN: f64 = 0.1;
pub const KAPPA_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ZEstimate {
    pub z_approx: f64,
    /// Union of the two top-k id sets, ascending.
    pub support: Vec<usize>,
    pub k: usize,
}

fn union_ids(a: &SparseTopK, b: &SparseTopK) -> Vec<usize> {
    a.ids().chain(b.ids()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// `Σ min(p_inf, p_new/λ)` over the union of the two lists. A token missing
/// from one list counts as probability 0 on that side.
pub fn z_topk_approx(topk_inf: &SparseTopK, topk_new: &SparseTopK, params: ObrsParams) -> ZEstimate {
    let log_lambda = params.lambda().ln();
    let support = union_ids(topk_inf, topk_new);
    let z_approx = support
        .iter()
        .map(|&id| match (topk_inf.log_prob_of(id), topk_new.log_prob_of(id)) {
            (Some(li), Some(ln)) => li.min(ln - log_lambda).exp(),
            _ => 0.0,
        })
        .sum();
    ZEstimate {
        z_approx,
        support,
        k: topk_inf.k().max(topk_new.k()),
    }
}

/// `Σ min(q, p/λ)` over the union of `top-k(q)` and `top-k(p)`, reading both
/// probabilities from the full distributions. This is the estimate an
/// observer with full logits would form on the same support; it bounds
/// [`z_topk_approx`] from above and `Z` from below.
pub fn z_union_full_values(
    p: &Categorical,
    q: &Categorical,
    params: ObrsParams,
    k: usize,
) -> Result<ZEstimate> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::VocabMismatch {
            left: p.vocab_size(),
            right: q.vocab_size(),
        });
    }
    let log_lambda = params.lambda().ln();
    let support = union_ids(&top_k(q, k)?, &top_k(p, k)?);
    let z_approx = support
        .iter()
        .map(|&id| q.log_prob(id).min(p.log_prob(id) - log_lambda).exp())
        .sum();
    Ok(ZEstimate { z_approx, support, k })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchCalibration {
    pub proposed: u64,
    pub accepted: u64,
    pub alpha_hat: f64,
    pub mean_z_approx: f64,
    pub kappa: f64,
    /// True when the raw ratio fell outside `[KAPPA_MIN, KAPPA_MAX]`.
    pub clamped: bool,
}

impl BatchCalibration {
    /// The neutral calibration, `κ = 1`.
    pub fn identity(mean_z_approx: f64) -> Self {
        Self {
            proposed: 0,
            accepted: 0,
            alpha_hat: mean_z_approx,
            mean_z_approx,
            kappa: 1.0,
            clamped: false,
        }
    }

    pub fn corrected(&self, z_approx: f64) -> f64 {
        self.kappa * z_approx
    }
}

pub fn calibrate(z_approx_values: &[f64], proposed: u64, accepted: u64) -> Result<BatchCalibration> {
    if z_approx_values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    crate::error::check_finite("z_approx values", z_approx_values)?;
    if proposed == 0 {
        return Err(Error::InvalidParameter {
            name: "proposed",
            value: 0.0,
            reason: "at least one proposal is required",
        });
    }
    if accepted > proposed {
        return Err(Error::InvalidParameter {
            name: "accepted",
            value: accepted as f64,
            reason: "cannot exceed the number of proposals",
        });
    }
    let mean_z_approx = z_approx_values.iter().sum::<f64>() / z_approx_values.len() as f64;
    if !(mean_z_approx > 0.0) {
        return Err(Error::InvalidParameter {
            name: "mean_z_approx",
            value: mean_z_approx,
            reason: "mean normalizer estimate must be positive",
        });
    }
    let alpha_hat = accepted as f64 / proposed as f64;
    let raw = alpha_hat / mean_z_approx;
    let kappa = raw.clamp(KAPPA_MIN, KAPPA_MAX);
    Ok(BatchCalibration {
        proposed,
        accepted,
        alpha_hat,
        mean_z_approx,
        kappa,
        clamped: kappa != raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZErrorRow {
    pub k: usize,
    pub z_approx: f64,
    pub z_exact: f64,
    pub fraction: f64,
}

/// Fraction of the exact normalizer captured on the top-k union, for each `k`.
pub fn z_error_report(
    p: &Categorical,
    q: &Categorical,
    params: ObrsParams,
    ks: &[usize],
) -> Result<Vec<ZErrorRow>> {
    if ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter {
            name: "ks",
            value: f64::NAN,
            reason: "k values must be sorted ascending",
        });
    }
    let z_exact = acceptance_rate(p, q, params)?;
    if !(z_exact > 0.0) {
        return Err(Error::ZUnderflow);
    }
    ks.iter()
        .map(|&k| {
            let est = z_union_full_values(p, q, params, k)?;
            // Full support is the exact normalizer by definition.
            let z_approx = if k == p.vocab_size() { z_exact } else { est.z_approx };
            Ok(ZErrorRow {
                k,
                z_approx,
                z_exact,
                fraction: z_approx / z_exact,
            })
        })
        .collect()
}

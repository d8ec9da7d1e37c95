//! Optimal budgeted rejection sampling.
//!
//! A token `x ~ q` is kept with probability `a(x) = min(1, p(x) / (λ q(x)))`.
//! The kept tokens follow `q̃(x) = min(q(x), p(x)/λ) / Z` where
//! `Z = Σ min(q, p/λ)` is both the normalizer and the expected acceptance
//! rate. Small `λ` keeps everything (`q̃ = q`); `λ ≥ max p/q` is classical
//! rejection sampling (`q̃ = p`, `Z = 1/λ`).

use rand::RngCore;

use crate::categorical::{kl_divergence, Categorical, CdfTable};
use crate::error::{Error, Result};
use crate::rng::{unit_f64, KeyedStream};

/// Default cap on the expected number of proposals a sampling call may need.
pub const DEFAULT_PROPOSAL_CAP: f64 = 1e8;

/// The rejection scale `λ` (also written `C`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObrsParams {
    lambda: f64,
}

impl ObrsParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                value: lambda,
                reason: "must be positive and finite",
            });
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// `min(1, p / (λ q))` for a single token.
pub fn accept_prob(p_tok: f64, q_tok: f64, params: ObrsParams) -> Result<f64> {
    if !p_tok.is_finite() || !q_tok.is_finite() {
        return Err(Error::NonFinite {
            what: "token probabilities",
            index: 0,
        });
    }
    if q_tok <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "q_tok",
            value: q_tok,
            reason: "proposal probability must be positive",
        });
    }
    if p_tok < 0.0 {
        return Err(Error::NegativeMass {
            index: 0,
            value: p_tok,
        });
    }
    Ok((p_tok / (params.lambda * q_tok)).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostRejection {
    /// Per-token acceptance probability; 1 where `q` has no mass.
    pub accept_probs: Vec<f64>,
    /// Normalizer, equal to the expected acceptance rate.
    pub z: f64,
    /// Distribution of accepted tokens.
    pub kept_dist: Categorical,
}

fn check_pair(p: &Categorical, q: &Categorical) -> Result<()> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::VocabMismatch {
            left: p.vocab_size(),
            right: q.vocab_size(),
        });
    }
    Ok(())
}

/// `ln min(q_i, p_i/λ)` for every token.
fn log_kept_mass(p: &Categorical, q: &Categorical, log_lambda: f64) -> Vec<f64> {
    p.log_probs()
        .iter()
        .zip(q.log_probs())
        .map(|(&lp, &lq)| lq.min(lp - log_lambda))
        .collect()
}

/// `Z = Σ min(q, p/λ)`.
///
/// Near full acceptance the sum is evaluated as `1 - Σ (q - p/λ)₊`, which is
/// exactly 1 when no token is over-proposed; otherwise the direct sum is used.
fn normalizer(p: &Categorical, q: &Categorical, log_lambda: f64) -> f64 {
    let mut kept = 0.0;
    let mut excess = 0.0;
    for (&lp, &lq) in p.log_probs().iter().zip(q.log_probs()) {
        let scaled = lp - log_lambda;
        if lq > scaled {
            excess += lq.exp() - scaled.exp();
            kept += scaled.exp();
        } else {
            kept += lq.exp();
        }
    }
    if excess <= 0.5 {
        1.0 - excess
    } else {
        kept
    }
}

/// Expected acceptance rate `Z(λ)`.
pub fn acceptance_rate(p: &Categorical, q: &Categorical, params: ObrsParams) -> Result<f64> {
    check_pair(p, q)?;
    Ok(normalizer(p, q, params.lambda.ln()))
}

/// Acceptance probabilities, normalizer and kept distribution for target `p`
/// and proposal `q`.
pub fn post_rejection(p: &Categorical, q: &Categorical, params: ObrsParams) -> Result<PostRejection> {
    check_pair(p, q)?;
    let log_lambda = params.lambda.ln();
    let z = normalizer(p, q, log_lambda);
    if !(z > 0.0) {
        return Err(Error::ZUnderflow);
    }
    let log_z = z.ln();
    let kept = log_kept_mass(p, q, log_lambda)
        .into_iter()
        .map(|l| l - log_z)
        .collect();
    let accept_probs = p
        .log_probs()
        .iter()
        .zip(q.log_probs())
        .map(|(&lp, &lq)| {
            if lq == f64::NEG_INFINITY {
                1.0
            } else {
                (lp - lq - log_lambda).min(0.0).exp()
            }
        })
        .collect();
    Ok(PostRejection {
        accept_probs,
        z,
        kept_dist: Categorical::from_normalized_log_probs(kept),
    })
}

/// Smallest and largest density ratio `p_i / q_i` over tokens where both
/// distributions have mass.
pub fn ratio_range(p: &Categorical, q: &Categorical) -> Result<(f64, f64)> {
    check_pair(p, q)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&lp, &lq) in p.log_probs().iter().zip(q.log_probs()) {
        if lp == f64::NEG_INFINITY || lq == f64::NEG_INFINITY {
            continue;
        }
        let r = (lp - lq).exp();
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if lo > hi {
        return Err(Error::ZUnderflow);
    }
    Ok((lo, hi))
}

/// Finds `λ` with `Z(λ) = budget`.
///
/// `Z` is continuous and non-increasing, with breakpoints at the sorted
/// ratios `r_(j) = p/q`. Between two breakpoints the tokens with
/// `r ≤ λ` contribute `p/λ` and the rest contribute `q`, so
/// `Z(λ) = A_j + P_j / λ` and each segment solves in closed form.
/// A budget of 1 (or the largest reachable rate) returns the largest `λ`
/// achieving it.
pub fn solve_lambda_for_budget(p: &Categorical, q: &Categorical, budget: f64) -> Result<ObrsParams> {
    check_pair(p, q)?;
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::BudgetOutOfRange(budget));
    }

    // (ratio, p, q) over the proposal's support, ascending by ratio.
    let mut tokens: Vec<(f64, f64, f64)> = p
        .log_probs()
        .iter()
        .zip(q.log_probs())
        .filter(|(_, &lq)| lq > f64::NEG_INFINITY)
        .map(|(&lp, &lq)| (crate::categorical::clamped_ratio(lp, lq), lp.exp(), lq.exp()))
        .map(|(r, pp, qq)| if pp == 0.0 { (0.0, pp, qq) } else { (r, pp, qq) })
        .collect();
    tokens.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = tokens.len();

    let mut suffix_q = vec![0.0; n + 1];
    for j in (0..n).rev() {
        suffix_q[j] = suffix_q[j + 1] + tokens[j].2;
    }
    let first_positive = tokens.iter().position(|t| t.1 > 0.0).ok_or(Error::ZUnderflow)?;
    let reachable = suffix_q[first_positive];
    if budget > reachable + 1e-12 {
        return Err(Error::BudgetInfeasible {
            budget,
            max: reachable,
        });
    }

    let mut prefix_p = 0.0;
    for j in first_positive..=n {
        if j > first_positive {
            prefix_p += tokens[j - 1].1;
        }
        let lo = if j == 0 { 0.0 } else { tokens[j - 1].0 };
        let hi = if j < n { tokens[j].0 } else { f64::INFINITY };
        let above = suffix_q[j];
        if j == first_positive {
            // Z is flat at its maximum on (0, r_(j)].
            if budget >= above - 1e-12 {
                return ObrsParams::new(hi);
            }
            continue;
        }
        let z_hi = if hi.is_finite() { above + prefix_p / hi } else { 0.0 };
        if budget >= z_hi {
            let lambda = (prefix_p / (budget - above)).clamp(lo, hi);
            return ObrsParams::new(lambda);
        }
    }
    unreachable!("Z(λ) → 0 as λ → ∞, so every budget in (0, 1] lands in a segment")
}

/// One point of the contraction curve `G(λ) = KL(p ‖ q̃_λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlCurvePoint {
    pub c: f64,
    pub g: f64,
    /// Target mass on tokens with `p/q ≤ λ`.
    pub mass_b: f64,
    pub z: f64,
}

/// Evaluates `G(λ)` on a strictly increasing grid.
pub fn kl_curve(p: &Categorical, q: &Categorical, lambdas: &[f64]) -> Result<Vec<KlCurvePoint>> {
    check_pair(p, q)?;
    for (i, &c) in lambdas.iter().enumerate() {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "lambdas",
                value: c,
                reason: "grid values must be positive and finite",
            });
        }
        if i > 0 && c <= lambdas[i - 1] {
            return Err(Error::InvalidParameter {
                name: "lambdas",
                value: c,
                reason: "grid must be strictly increasing",
            });
        }
    }
    lambdas
        .iter()
        .map(|&c| {
            let params = ObrsParams::new(c)?;
            let post = post_rejection(p, q, params)?;
            let log_c = c.ln();
            let mass_b = p
                .log_probs()
                .iter()
                .zip(q.log_probs())
                .filter(|(&lp, &lq)| lq > f64::NEG_INFINITY && lp - log_c <= lq)
                .map(|(&lp, _)| lp.exp())
                .sum();
            Ok(KlCurvePoint {
                c,
                g: kl_divergence(p, &post.kept_dist)?,
                mass_b,
                z: post.z,
            })
        })
        .collect()
}

/// The two uniforms consumed by proposal `index`: words `2·index` and
/// `2·index + 1` of stream 0. The first picks the token, the second decides
/// acceptance.
pub fn proposal_uniforms(seed: u64, index: u64) -> (f64, f64) {
    let ks = KeyedStream::new(seed);
    (ks.uniform(0, 2 * index), ks.uniform(0, 2 * index + 1))
}

/// Draws `n_accept` tokens from `q`, keeping each with its OBRS acceptance
/// probability. The accepted tokens are distributed as `q̃`.
pub fn obrs_sample(
    q: &Categorical,
    p: &Categorical,
    params: ObrsParams,
    n_accept: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    obrs_sample_with_cap(q, p, params, n_accept, seed, DEFAULT_PROPOSAL_CAP)
}

pub fn obrs_sample_with_cap(
    q: &Categorical,
    p: &Categorical,
    params: ObrsParams,
    n_accept: usize,
    seed: u64,
    proposal_cap: f64,
) -> Result<Vec<usize>> {
    if n_accept == 0 {
        return Err(Error::InvalidParameter {
            name: "n_accept",
            value: 0.0,
            reason: "must be at least 1",
        });
    }
    let post = post_rejection(p, q, params)?;
    let expected = n_accept as f64 / post.z;
    if expected > proposal_cap {
        return Err(Error::ProposalCapExceeded {
            expected,
            cap: proposal_cap,
        });
    }
    let table = CdfTable::new(q);
    let mut rng = KeyedStream::new(seed).sequential(0);
    let mut accepted = Vec::with_capacity(n_accept);
    while accepted.len() < n_accept {
        let token = table.sample(unit_f64(rng.next_u64()));
        let u = unit_f64(rng.next_u64());
        if u < post.accept_probs[token] {
            accepted.push(token);
        }
    }
    Ok(accepted)
}

/// Number of acceptances among `n_proposals` proposals (same stream layout as
/// [`obrs_sample`]).
pub fn count_acceptances(
    q: &Categorical,
    p: &Categorical,
    params: ObrsParams,
    n_proposals: u64,
    seed: u64,
) -> Result<u64> {
    let post = post_rejection(p, q, params)?;
    let table = CdfTable::new(q);
    let mut rng = KeyedStream::new(seed).sequential(0);
    let mut accepted = 0;
    for _ in 0..n_proposals {
        let token = table.sample(unit_f64(rng.next_u64()));
        if unit_f64(rng.next_u64()) < post.accept_probs[token] {
            accepted += 1;
        }
    }
    Ok(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categorical::total_variation;

    fn cat(p: &[f64]) -> Categorical {
        Categorical::from_probs(p).unwrap()
    }

    fn three_token() -> (Categorical, Categorical) {
        (cat(&[0.2, 0.3, 0.5]), cat(&[0.5, 0.3, 0.2]))
    }

    fn lam(x: f64) -> ObrsParams {
        ObrsParams::new(x).unwrap()
    }

    #[test]
    fn accept_prob_examples() {
        assert_eq!(accept_prob(0.3, 0.3, lam(1.0)).unwrap(), 1.0);
        assert!((accept_prob(0.2, 0.5, lam(1.0)).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(accept_prob(0.5, 0.2, lam(1.0)).unwrap(), 1.0);
        assert!(accept_prob(0.5, 0.0, lam(1.0)).is_err());
        assert!(accept_prob(f64::NAN, 0.5, lam(1.0)).is_err());
        assert!(ObrsParams::new(0.0).is_err());
        assert!(ObrsParams::new(f64::INFINITY).is_err());
    }

    #[test]
    fn post_rejection_three_tokens() {
        let (p, q) = three_token();
        let post = post_rejection(&p, &q, lam(1.0)).unwrap();
        for (a, want) in post.accept_probs.iter().zip([0.4, 1.0, 1.0]) {
            assert!((a - want).abs() < 1e-12);
        }
        assert!((post.z - 0.7).abs() < 1e-12);
        for (k, want) in post.kept_dist.probs().iter().zip([2.0 / 7.0, 3.0 / 7.0, 2.0 / 7.0]) {
            assert!((k - want).abs() < 1e-12);
        }
    }

    #[test]
    fn post_rejection_classical_limit() {
        let (p, q) = three_token();
        let post = post_rejection(&p, &q, lam(2.5)).unwrap();
        assert!((post.z - 0.4).abs() < 1e-12);
        for (k, want) in post.kept_dist.probs().iter().zip(p.probs()) {
            assert!((k - want).abs() < 1e-12);
        }
    }

    #[test]
    fn post_rejection_matched_is_exact() {
        let q = cat(&[0.1, 0.6, 0.3]);
        for l in [0.25, 0.5, 1.0] {
            let post = post_rejection(&q, &q, lam(l)).unwrap();
            assert_eq!(post.z, 1.0);
            assert_eq!(post.kept_dist, q);
        }
    }

    #[test]
    fn post_rejection_errors() {
        let (p, _) = three_token();
        assert!(matches!(
            post_rejection(&p, &cat(&[0.5, 0.5]), lam(1.0)),
            Err(Error::VocabMismatch { .. })
        ));
        let disjoint_p = cat(&[1.0, 0.0]);
        let disjoint_q = cat(&[0.0, 1.0]);
        assert!(matches!(
            post_rejection(&disjoint_p, &disjoint_q, lam(1.0)),
            Err(Error::ZUnderflow)
        ));
    }

    #[test]
    fn z_at_one_is_one_minus_tv() {
        let (p, q) = three_token();
        let z = acceptance_rate(&p, &q, lam(1.0)).unwrap();
        assert!((z - (1.0 - total_variation(&p, &q).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn budget_solver_examples() {
        let (p, q) = three_token();
        let l = solve_lambda_for_budget(&p, &q, 0.7).unwrap().lambda();
        assert!((l - 1.0).abs() < 1e-12);
        // Segment [0.4, 1): Z = 0.2/λ + 0.5.
        let l = solve_lambda_for_budget(&p, &q, 0.8).unwrap().lambda();
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
        let l = solve_lambda_for_budget(&q, &q, 1.0).unwrap().lambda();
        assert!((l - 1.0).abs() < 1e-12);
        // Full acceptance returns the smallest ratio.
        let l = solve_lambda_for_budget(&p, &q, 1.0).unwrap().lambda();
        assert!((l - 0.4).abs() < 1e-12);
        // Past the largest ratio, Z = 1/λ.
        let l = solve_lambda_for_budget(&p, &q, 0.1).unwrap().lambda();
        assert!((l - 10.0).abs() < 1e-9);
    }

    #[test]
    fn budget_solver_errors() {
        let (p, q) = three_token();
        assert!(matches!(solve_lambda_for_budget(&p, &q, 0.0), Err(Error::BudgetOutOfRange(_))));
        assert!(matches!(solve_lambda_for_budget(&p, &q, 1.5), Err(Error::BudgetOutOfRange(_))));
        // p has no mass on token 0, so at most 1 - q_0 is reachable.
        let p0 = cat(&[0.0, 0.5, 0.5]);
        assert!(matches!(
            solve_lambda_for_budget(&p0, &q, 1.0),
            Err(Error::BudgetInfeasible { .. })
        ));
        let l = solve_lambda_for_budget(&p0, &q, 0.5).unwrap();
        assert!((acceptance_rate(&p0, &q, l).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_curve_three_tokens() {
        let (p, q) = three_token();
        let curve = kl_curve(&p, &q, &[0.4, 1.0, 2.5]).unwrap();
        let expected = [0.274887, 0.101470, 0.0];
        for (pt, want) in curve.iter().zip(expected) {
            assert!((pt.g - want).abs() < 1e-6, "{pt:?}");
        }
        // Exact oracles: at λ = 1, KL = 0.5 ln(1.225).
        assert!((curve[1].g - 0.5 * 1.225f64.ln()).abs() < 1e-14);
        assert!(curve[2].g < 1e-12);
        assert!((curve[0].mass_b - 0.2).abs() < 1e-15);
        assert!((curve[1].mass_b - 0.5).abs() < 1e-15);
        assert!((curve[2].mass_b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_curve_matched_is_zero() {
        let q = cat(&[0.1, 0.6, 0.3]);
        for pt in kl_curve(&q, &q, &[0.5, 1.0, 3.0]).unwrap() {
            assert!(pt.g < 1e-15);
        }
    }

    #[test]
    fn kl_curve_rejects_bad_grid() {
        let (p, q) = three_token();
        assert!(kl_curve(&p, &q, &[1.0, 1.0]).is_err());
        assert!(kl_curve(&p, &q, &[2.0, 1.0]).is_err());
        assert!(kl_curve(&p, &q, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn sampler_without_rejection() {
        let q = cat(&[0.1, 0.6, 0.3]);
        let params = lam(1.0);
        let out = obrs_sample(&q, &q, params, 1000, 3).unwrap();
        assert_eq!(out.len(), 1000);
        // Every proposal is accepted.
        assert_eq!(count_acceptances(&q, &q, params, 1000, 3).unwrap(), 1000);
    }

    #[test]
    fn sampler_is_deterministic() {
        let (p, q) = three_token();
        let a = obrs_sample(&q, &p, lam(1.0), 500, 11).unwrap();
        let b = obrs_sample(&q, &p, lam(1.0), 500, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, obrs_sample(&q, &p, lam(1.0), 500, 12).unwrap());
    }

    #[test]
    fn sampler_stream_is_keyed_by_proposal_index() {
        let (p, q) = three_token();
        let post = post_rejection(&p, &q, lam(1.0)).unwrap();
        let table = CdfTable::new(&q);
        let expected: Vec<usize> = (0..)
            .map(|i| proposal_uniforms(5, i))
            .filter_map(|(u, v)| {
                let t = table.sample(u);
                (v < post.accept_probs[t]).then_some(t)
            })
            .take(200)
            .collect();
        assert_eq!(obrs_sample(&q, &p, lam(1.0), 200, 5).unwrap(), expected);
    }

    #[test]
    fn sampler_cap() {
        let p = cat(&[1e-12, 1.0 - 1e-12]);
        let q = cat(&[1.0 - 1e-12, 1e-12]);
        let err = obrs_sample(&q, &p, lam(1e6), 10, 0).unwrap_err();
        assert!(matches!(err, Error::ProposalCapExceeded { .. }));
        assert!(obrs_sample(&q, &q, lam(1.0), 0, 0).is_err());
    }
}

//! Brute-force checks for the OBRS theory.
//!
//! The acceptance-rule oracle maximizes `Σ p_i ln α_i` subject to
//! `Σ q_i α_i = budget` and `0 ≤ α ≤ 1` by enumerating which tokens sit at
//! the upper bound. With the saturated set `S` fixed, the stationarity
//! condition gives `α_i = p_i / (μ q_i)` off `S`, and the budget fixes `μ`.
//! Nothing here calls the closed-form OBRS solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::categorical::Categorical;
use crate::error::{Error, Result};
use crate::obrs::{acceptance_rate, post_rejection, solve_lambda_for_budget, ObrsParams};

pub const ORACLE_MAX_VOCAB: usize = 14;

const FEAS_TOL: f64 = 1e-12;

/// Token-wise acceptance probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceRule {
    pub alphas: Vec<f64>,
}

impl AcceptanceRule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        for (index, &a) in alphas.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidRecord {
                    index,
                    message: format!("acceptance probability {a} outside [0, 1]"),
                });
            }
        }
        Ok(Self { alphas })
    }

    /// `Σ q_i α_i`.
    pub fn budget(&self, q: &Categorical) -> f64 {
        q.probs().iter().zip(&self.alphas).map(|(q, a)| q * a).sum()
    }

    /// `Σ p_i ln α_i` over tokens with `p_i > 0`.
    pub fn log_objective(&self, p: &Categorical) -> f64 {
        p.probs()
            .iter()
            .zip(&self.alphas)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(pi, a)| pi * a.ln())
            .sum()
    }

    /// `KL(p ‖ qα / Σ qα)`, infinite when an accepted-mass gap meets `p`.
    pub fn kl_from(&self, p: &Categorical, q: &Categorical) -> f64 {
        let b = self.budget(q);
        let mut kl = 0.0;
        for ((pi, qi), a) in p.probs().iter().zip(q.probs()).zip(&self.alphas) {
            if *pi == 0.0 {
                continue;
            }
            let kept = qi * a;
            if kept <= 0.0 {
                return f64::INFINITY;
            }
            kl += pi * (pi * b / kept).ln();
        }
        kl.max(0.0)
    }
}

fn check_oracle_input(p: &Categorical, q: &Categorical, budget: f64) -> Result<()> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::VocabMismatch {
            left: p.vocab_size(),
            right: q.vocab_size(),
        });
    }
    if p.vocab_size() > ORACLE_MAX_VOCAB {
        return Err(Error::OracleTooLarge {
            size: p.vocab_size(),
            max: ORACLE_MAX_VOCAB,
        });
    }
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::BudgetOutOfRange(budget));
    }
    Ok(())
}

/// Every feasible KKT candidate, one per saturation pattern that yields a
/// valid rule, paired with its objective `Σ p ln α`.
pub fn oracle_candidates(p: &Categorical, q: &Categorical, budget: f64) -> Result<Vec<(AcceptanceRule, f64)>> {
    check_oracle_input(p, q, budget)?;
    let pp = p.probs();
    let qq = q.probs();
    let v = pp.len();
    let mut out = Vec::new();
    for set in 0u32..(1 << v) {
        let saturated = |i: usize| set & (1 << i) != 0 || qq[i] == 0.0;
        let mut q_sat = 0.0;
        let mut p_free = 0.0;
        for i in 0..v {
            if saturated(i) {
                q_sat += qq[i];
            } else {
                p_free += pp[i];
            }
        }
        let remaining = budget - q_sat;
        let alphas: Vec<f64> = if p_free == 0.0 {
            // Free tokens carry no target mass and take α = 0.
            if remaining.abs() > FEAS_TOL {
                continue;
            }
            (0..v).map(|i| if saturated(i) { 1.0 } else { 0.0 }).collect()
        } else {
            if remaining <= 0.0 {
                continue;
            }
            let mu = p_free / remaining;
            let alphas: Vec<f64> = (0..v)
                .map(|i| if saturated(i) { 1.0 } else { pp[i] / (mu * qq[i]) })
                .collect();
            if alphas.iter().any(|&a| a > 1.0 + FEAS_TOL) {
                continue;
            }
            alphas.into_iter().map(|a| a.min(1.0)).collect()
        };
        let rule = AcceptanceRule { alphas };
        if pp.iter().zip(&rule.alphas).any(|(&pi, &a)| pi > 0.0 && a == 0.0) {
            continue;
        }
        let obj = rule.log_objective(p);
        out.push((rule, obj));
    }
    Ok(out)
}

/// The best feasible candidate.
pub fn oracle_optimal_rule(p: &Categorical, q: &Categorical, budget: f64) -> Result<AcceptanceRule> {
    oracle_candidates(p, q, budget)?
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(rule, _)| rule)
        .ok_or(Error::OracleInfeasible(budget))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    pub budget: f64,
    pub lambda: f64,
    pub obrs_kl: f64,
    pub oracle_kl: f64,
    /// `obrs_kl - oracle_kl`; positive means the oracle did better.
    pub oracle_gap: f64,
    /// Smallest `kl(perturbed) - obrs_kl`; negative means a perturbation did better.
    pub worst_perturbation_margin: f64,
    /// Largest entrywise deviation from the OBRS rule among near-optimal
    /// oracle candidates.
    pub uniqueness_deviation: f64,
    pub passed: bool,
}

/// Compares the OBRS rule for `budget` with the oracle optimum and with
/// `n_perturb` random budget-preserving perturbations of itself.
pub fn verify_obrs_optimality(
    p: &Categorical,
    q: &Categorical,
    budget: f64,
    tol: f64,
    n_perturb: usize,
    seed: u64,
) -> Result<OptimalityReport> {
    check_oracle_input(p, q, budget)?;
    let params = solve_lambda_for_budget(p, q, budget)?;
    let obrs_rule = AcceptanceRule::new(post_rejection(p, q, params)?.accept_probs)?;
    let obrs_kl = obrs_rule.kl_from(p, q);

    let candidates = oracle_candidates(p, q, budget)?;
    let best = candidates
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::OracleInfeasible(budget))?;
    let oracle_kl = best.0.kl_from(p, q);
    let best_kl = oracle_kl;
    let uniqueness_deviation = candidates
        .iter()
        .filter(|(rule, _)| rule.kl_from(p, q) <= best_kl + 1e-9)
        .flat_map(|(rule, _)| {
            rule.alphas
                .iter()
                .zip(&obrs_rule.alphas)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);

    let qq = q.probs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let v = qq.len();
    for _ in 0..n_perturb {
        let mut alphas = obrs_rule.alphas.clone();
        let steps = rng.random_range(1..=3);
        for _ in 0..steps {
            let i = rng.random_range(0..v);
            let j = (i + rng.random_range(1..v)) % v;
            if qq[i] == 0.0 || qq[j] == 0.0 {
                continue;
            }
            // Moving δ of proposal mass from j to i keeps Σ q α fixed.
            let lo = (-alphas[i] * qq[i]).max((alphas[j] - 1.0) * qq[j]);
            let hi = ((1.0 - alphas[i]) * qq[i]).min(alphas[j] * qq[j]);
            if hi <= lo {
                continue;
            }
            let scale = 10f64.powi(-rng.random_range(0..7));
            let delta = (lo + rng.random::<f64>() * (hi - lo)) * scale;
            alphas[i] = (alphas[i] + delta / qq[i]).clamp(0.0, 1.0);
            alphas[j] = (alphas[j] - delta / qq[j]).clamp(0.0, 1.0);
        }
        let kl = AcceptanceRule { alphas }.kl_from(p, q);
        worst = worst.min(kl - obrs_kl);
    }

    let oracle_gap = obrs_kl - oracle_kl;
    let passed = oracle_gap <= tol && worst >= -1e-9 && uniqueness_deviation <= 1e-6;
    Ok(OptimalityReport {
        budget,
        lambda: params.lambda(),
        obrs_kl,
        oracle_kl,
        oracle_gap,
        worst_perturbation_margin: worst,
        uniqueness_deviation,
        passed,
    })
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter {
            name: "h",
            value: h,
            reason: "step must be positive",
        });
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference evaluation",
                index: i,
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Solves `Z(λ) = budget` by bisection on `ln λ`. Independent of the
/// piecewise closed form; used to cross-check it.
pub fn bisect_lambda_for_budget(p: &Categorical, q: &Categorical, budget: f64, tol: f64) -> Result<f64> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::BudgetOutOfRange(budget));
    }
    let z = |lambda: f64| acceptance_rate(p, q, ObrsParams::new(lambda)?);
    // Z ≤ 1/λ, so λ = 2/budget is always past the target.
    let mut lo = 1e-300f64.ln();
    let mut hi = (2.0 / budget).ln();
    if z(lo.exp())? < budget - tol {
        return Err(Error::BudgetInfeasible {
            budget,
            max: z(lo.exp())?,
        });
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if z(mid.exp())? >= budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(lo.exp())
}

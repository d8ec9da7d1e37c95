//! Dense categorical distributions stored in log space.
//!
//! A [`Categorical`] holds one log-probability per token id. Exact-zero mass
//! is `-inf`. Divergences follow the convention `0 · ln(0 / q) = 0` and
//! refuse to evaluate when the first argument has mass outside the support
//! of the second.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};

/// Exponent bound used for probability ratios computed in log space.
pub const RATIO_LOG_CLAMP: f64 = 700.0;

/// Slack allowed on the total mass of a [`SparseTopK`].
pub const TOPK_MASS_TOL: f64 = 1e-9;

/// Stable `ln Σ exp(x_i)`; returns `-inf` for an all-`-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `exp(log_num - log_den)` with the exponent clamped to `[-700, 700]`.
pub fn clamped_ratio(log_num: f64, log_den: f64) -> f64 {
    let d = log_num - log_den;
    if d.is_nan() {
        // -inf - -inf: both zero; callers treat this as a neutral ratio.
        return 1.0;
    }
    d.clamp(-RATIO_LOG_CLAMP, RATIO_LOG_CLAMP).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    log_probs: Vec<f64>,
}

impl Categorical {
    /// Normalizes non-negative weights into a distribution.
    pub fn from_probs(weights: &[f64]) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::TooFewEntries(weights.len()));
        }
        for (index, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFinite {
                    what: "probabilities",
                    index,
                });
            }
            if w < 0.0 {
                return Err(Error::NegativeMass { index, value: w });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass);
        }
        let log_total = total.ln();
        let log_probs = weights
            .iter()
            .map(|&w| if w == 0.0 { f64::NEG_INFINITY } else { w.ln() - log_total })
            .collect();
        Ok(Self { log_probs })
    }

    /// Normalizes unnormalized log-weights (`-inf` allowed) with log-sum-exp.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.len() < 2 {
            return Err(Error::TooFewEntries(log_weights.len()));
        }
        for (index, &w) in log_weights.iter().enumerate() {
            if w.is_nan() || w == f64::INFINITY {
                return Err(Error::NonFinite {
                    what: "log-weights",
                    index,
                });
            }
        }
        let lse = log_sum_exp(log_weights);
        if lse == f64::NEG_INFINITY {
            return Err(Error::ZeroMass);
        }
        Ok(Self {
            log_probs: log_weights.iter().map(|w| w - lse).collect(),
        })
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        Self::from_probs(&vec![1.0; vocab_size])
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, token: usize) -> f64 {
        self.log_probs[token]
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.log_probs[token].exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Residual of the normalization, `|ln Σ p_i|`.
    pub fn normalization_error(&self) -> f64 {
        log_sum_exp(&self.log_probs).abs()
    }

    /// Wraps log-probs that are already normalized by construction.
    pub(crate) fn from_normalized_log_probs(log_probs: Vec<f64>) -> Self {
        Self { log_probs }
    }
}

/// Inverse-CDF lookup table for drawing token ids from a distribution.
#[derive(Debug, Clone)]
pub struct CdfTable {
    cumulative: Vec<f64>,
}

impl CdfTable {
    pub fn new(dist: &Categorical) -> Self {
        let mut acc = 0.0;
        let cumulative = dist
            .log_probs()
            .iter()
            .map(|lp| {
                acc += lp.exp();
                acc
            })
            .collect();
        Self { cumulative }
    }

    /// Token whose CDF interval contains `u ∈ [0, 1)`.
    pub fn sample(&self, u: f64) -> usize {
        let total = *self.cumulative.last().expect("non-empty distribution");
        let x = u * total;
        let idx = self.cumulative.partition_point(|&c| c <= x);
        if idx < self.cumulative.len() {
            return idx;
        }
        // Rounding pushed x onto the total: take the last token with mass.
        let last_mass = self.cumulative.iter().rposition(|&c| c < total).map_or(0, |i| i + 1);
        last_mass.min(self.cumulative.len() - 1)
    }
}

/// Builds a normalized distribution from non-negative weights.
pub fn make_categorical(weights: &[f64]) -> Result<Categorical> {
    Categorical::from_probs(weights)
}

fn check_same_vocab(p: &Categorical, q: &Categorical) -> Result<()> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::VocabMismatch {
            left: p.vocab_size(),
            right: q.vocab_size(),
        });
    }
    Ok(())
}

/// `KL(p ‖ q)` in nats.
pub fn kl_divergence(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_same_vocab(p, q)?;
    let mut total = 0.0;
    for (index, (&lp, &lq)) in p.log_probs.iter().zip(&q.log_probs).enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Err(Error::SupportViolation { index, p: lp.exp() });
        }
        total += lp.exp() * (lp - lq);
    }
    Ok(total.max(0.0))
}

/// Half the L1 distance between `p` and `q`.
pub fn total_variation(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_same_vocab(p, q)?;
    let l1: f64 = p
        .log_probs
        .iter()
        .zip(&q.log_probs)
        .map(|(lp, lq)| (lp.exp() - lq.exp()).abs())
        .sum();
    Ok(0.5 * l1)
}

/// Highest-probability tokens of one distribution, as `(token_id, log_prob)`
/// sorted by descending log-prob with ties broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTopK {
    entries: Vec<(usize, f64)>,
}

impl SparseTopK {
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        Self::with_mass_tolerance(entries, TOPK_MASS_TOL)
    }

    /// Like [`SparseTopK::new`] with a caller-chosen slack on the total mass,
    /// for lists read from serving engines that round log-probs.
    pub fn with_mass_tolerance(entries: Vec<(usize, f64)>, mass_tol: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::KOutOfRange { k: 0, vocab: 0 });
        }
        for (index, &(_, lp)) in entries.iter().enumerate() {
            if !lp.is_finite() {
                return Err(Error::NonFinite {
                    what: "top-k log-probs",
                    index,
                });
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for &(id, _) in &entries {
            if !seen.insert(id) {
                return Err(Error::DuplicateToken(id));
            }
        }
        for (i, w) in entries.windows(2).enumerate() {
            let ((id_a, lp_a), (id_b, lp_b)) = (w[0], w[1]);
            if lp_a < lp_b || (lp_a == lp_b && id_a > id_b) {
                return Err(Error::UnsortedTopK(i + 1));
            }
        }
        let sparse = Self { entries };
        let mass = sparse.mass();
        if mass > 1.0 + mass_tol {
            return Err(Error::TopKMassExceeded(mass));
        }
        Ok(sparse)
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(id, _)| id)
    }

    pub fn log_prob_of(&self, token: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|&&(id, _)| id == token)
            .map(|&(_, lp)| lp)
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|&(_, lp)| lp.exp()).sum()
    }

    /// The first `k` entries, which are the top-`k` of the same source.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::KOutOfRange { k, vocab: self.k() });
        }
        Ok(Self {
            entries: self.entries[..k].to_vec(),
        })
    }
}

/// The `k` most probable tokens of `dist`.
pub fn top_k(dist: &Categorical, k: usize) -> Result<SparseTopK> {
    let vocab = dist.vocab_size();
    if k == 0 || k > vocab {
        return Err(Error::KOutOfRange { k, vocab });
    }
    let mut ids: Vec<usize> = (0..vocab).collect();
    let lp = dist.log_probs();
    ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    // Zero-mass tokens can only appear when k exceeds the support; they are
    // stored at the smallest finite log-prob so the list stays serializable.
    let entries = ids[..k]
        .iter()
        .map(|&id| (id, lp[id].max(f64::MIN)))
        .collect();
    Ok(SparseTopK { entries })
}

/// Controls for a synthetic `(p, q)` pair: `p ~ Dirichlet(alpha · 1)` and `q`
/// is `p` with i.i.d. `N(0, noise_scale²)` added to every log-prob.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPairConfig {
    pub vocab_size: usize,
    pub dirichlet_alpha: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SimPairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::TooFewEntries(self.vocab_size));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "dirichlet_alpha",
                value: self.dirichlet_alpha,
                reason: "must be positive and finite",
            });
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "noise_scale",
                value: self.noise_scale,
                reason: "must be non-negative and finite",
            });
        }
        Ok(())
    }
}

/// Draws a target `p` and a noisy proposal `q`. Deterministic in `cfg.seed`;
/// `noise_scale = 0` returns `q == p`.
pub fn dirichlet_pair(cfg: &SimPairConfig) -> Result<(Categorical, Categorical)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0).map_err(|_| Error::InvalidParameter {
        name: "dirichlet_alpha",
        value: cfg.dirichlet_alpha,
        reason: "rejected by the gamma sampler",
    })?;
    let draws: Vec<f64> = (0..cfg.vocab_size).map(|_| gamma.sample(&mut rng)).collect();
    let p = Categorical::from_probs(&draws)?;
    if cfg.noise_scale == 0.0 {
        return Ok((p.clone(), p));
    }
    let normal = Normal::new(0.0, cfg.noise_scale).expect("validated noise scale");
    let noisy: Vec<f64> = p
        .log_probs()
        .iter()
        .map(|lp| lp + normal.sample(&mut rng))
        .collect();
    let q = Categorical::from_log_weights(&noisy)?;
    Ok((p, q))
}

//! Per-token off-policy correction: Bernoulli masks from OBRS acceptance,
//! calibrated OBRS weights and the final jackpot weight `ρ`.
//!
//! Computing weights for a batch is a two-pass reduction. The first pass
//! draws masks and estimates `Z_approx` per token; the counts and sums are
//! reduced into a [`BatchCalibration`]. The second pass turns each token into
//! [`TokenWeights`] with the frozen `κ`. Both passes are per-token pure, so
//! they are run in parallel.

mod loss;

pub use loss::*;

use rayon::prelude::*;

use crate::categorical::{clamped_ratio, SparseTopK};
use crate::error::{Error, Result};
use crate::obrs::ObrsParams;
use crate::rng::KeyedStream;
use crate::z_estimator::{calibrate, z_topk_approx, BatchCalibration};

/// Largest log-prob accepted from external sources (serving engines round).
pub const LOGP_TOL: f64 = 1e-6;

/// One sampled token with the side information stored at rollout time.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub token_id: usize,
    pub logp_inf: f64,
    pub logp_ref: f64,
    pub logp_new: f64,
    pub topk_inf: SparseTopK,
    pub topk_new: SparseTopK,
    pub advantage: f64,
    pub group_id: u64,
    pub position: u64,
    pub trajectory_id: u64,
}

impl TokenRecord {
    /// Checks finiteness, the log-prob ceiling, and that a top-k list which
    /// contains the sampled token agrees with the stored log-prob.
    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |message: String| Err(Error::InvalidRecord { index, message });
        for (name, v) in [
            ("logp_inf", self.logp_inf),
            ("logp_ref", self.logp_ref),
            ("logp_new", self.logp_new),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
            if v > LOGP_TOL {
                return bad(format!("{name} = {v} is not a log-probability"));
            }
        }
        if !self.advantage.is_finite() {
            return bad("advantage is not finite".into());
        }
        for (name, list, lp) in [
            ("topk_inf", &self.topk_inf, self.logp_inf),
            ("topk_new", &self.topk_new, self.logp_new),
        ] {
            if let Some(listed) = list.log_prob_of(self.token_id) {
                if (listed - lp).abs() > LOGP_TOL.max(1e-9 * lp.abs()) {
                    return bad(format!(
                        "{name} lists token {} at {listed}, record has {lp}",
                        self.token_id
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Which distribution the accepted tokens should follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetPolicy {
    /// The policy being optimized (`p_new`).
    #[default]
    Latest,
    /// The behaviour snapshot (`p_ref`).
    Reference,
}

/// How the OBRS weight and the reference correction combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightForm {
    /// `min(w, c1) · min(p_ref/p_tgt, c2)`.
    #[default]
    Separate,
    /// `min(w, c1) · p_ref/p_tgt`, uncapped second factor.
    Composed,
}

/// Source of `κ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Calibration {
    /// Acceptance counts taken from this batch's masks.
    #[default]
    Batch,
    /// Externally observed proposal and acceptance counts.
    Counts { proposed: u64, accepted: u64 },
    /// `κ = 1`; use when the supplied normalizers are exact.
    Disabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JackpotConfig {
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub top_k: usize,
    pub target_policy: TargetPolicy,
    pub mask_seed: u64,
    pub masking: bool,
    pub reweighting: bool,
    pub weight_form: WeightForm,
    pub calibration: Calibration,
}

impl Default for JackpotConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            c1: 3.0,
            c2: default_c2(0.28),
            top_k: 20,
            target_policy: TargetPolicy::Latest,
            mask_seed: 0,
            masking: true,
            reweighting: true,
            weight_form: WeightForm::Separate,
            calibration: Calibration::Batch,
        }
    }
}

/// `c2` just above the PPO upper clip `1 + eps_high`.
pub fn default_c2(eps_high: f64) -> f64 {
    if eps_high == 0.28 {
        1.28
    } else {
        1.0 + eps_high + 0.05
    }
}

impl JackpotConfig {
    pub fn validate(&self) -> Result<()> {
        ObrsParams::new(self.lambda)?;
        let check = |name, value: f64, ok: bool, reason| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter { name, value, reason })
            }
        };
        check("c1", self.c1, self.c1 >= 1.0 && self.c1.is_finite(), "must be finite and at least 1")?;
        check("c2", self.c2, self.c2 >= 1.0 && self.c2.is_finite(), "must be finite and at least 1")?;
        check("top_k", self.top_k as f64, self.top_k >= 1, "must be at least 1")?;
        if let Calibration::Counts { proposed, accepted } = self.calibration {
            check("proposed", proposed as f64, proposed >= 1, "must be at least 1")?;
            check("accepted", accepted as f64, accepted <= proposed, "cannot exceed proposed")?;
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ObrsParams> {
        ObrsParams::new(self.lambda)
    }

    fn target_logp(&self, rec: &TokenRecord) -> f64 {
        match self.target_policy {
            TargetPolicy::Latest => rec.logp_new,
            TargetPolicy::Reference => rec.logp_ref,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenWeights {
    pub mask: u8,
    pub accept_prob: f64,
    pub z_corrected: f64,
    pub w_obrs: f64,
    pub rho: f64,
    pub tis_weight: f64,
    pub tis_adjusted_weight: f64,
}

/// `min(1, p_tgt / (λ p_inf))` for the sampled token.
pub fn accept_prob(rec: &TokenRecord, cfg: &JackpotConfig) -> Result<f64> {
    crate::error::check_finite("token log-probs", &[rec.logp_inf, rec.logp_ref, rec.logp_new])?;
    let log_a = cfg.target_logp(rec) - rec.logp_inf - cfg.lambda.ln();
    Ok(log_a.min(0.0).exp())
}

/// Draws `Mask(x) ~ Bernoulli(a(x))` from the stream keyed by
/// `(mask_seed, trajectory_id, position)`.
pub fn bernoulli_mask(rec: &TokenRecord, cfg: &JackpotConfig) -> Result<(u8, f64)> {
    let a = accept_prob(rec, cfg)?;
    let u = KeyedStream::new(cfg.mask_seed).uniform(rec.trajectory_id, rec.position);
    Ok((u8::from(u < a), a))
}

fn keyed_mask(stream: &KeyedStream, rec: &TokenRecord, cfg: &JackpotConfig) -> Result<(u8, f64)> {
    let a = accept_prob(rec, cfg)?;
    let u = stream.uniform(rec.trajectory_id, rec.position);
    Ok((u8::from(u < a), a))
}

/// Weights for one token given its corrected normalizer and mask draw.
pub fn jackpot_weight(
    rec: &TokenRecord,
    cfg: &JackpotConfig,
    z_corrected: f64,
    tis_c: f64,
) -> Result<TokenWeights> {
    let (mask, accept_prob) = bernoulli_mask(rec, cfg)?;
    weight_from_parts(rec, cfg, z_corrected, tis_c, mask, accept_prob)
}

fn weight_from_parts(
    rec: &TokenRecord,
    cfg: &JackpotConfig,
    z_corrected: f64,
    tis_c: f64,
    mask: u8,
    accept_prob: f64,
) -> Result<TokenWeights> {
    // Disjoint top-k lists legitimately give a zero estimate.
    if !(z_corrected >= 0.0 && z_corrected.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "z_corrected",
            value: z_corrected,
            reason: "must be non-negative and finite",
        });
    }
    let logp_tgt = cfg.target_logp(rec);
    let w_obrs = z_corrected * cfg.lambda.max(clamped_ratio(logp_tgt, rec.logp_inf));
    let obrs_factor = if cfg.reweighting { w_obrs.min(cfg.c1) } else { 1.0 };
    let ref_ratio = clamped_ratio(rec.logp_ref, logp_tgt);
    let rho = match cfg.weight_form {
        WeightForm::Separate => obrs_factor * ref_ratio.min(cfg.c2),
        WeightForm::Composed => obrs_factor * ref_ratio,
    };
    Ok(TokenWeights {
        mask: if cfg.masking { mask } else { 1 },
        accept_prob,
        z_corrected,
        w_obrs,
        rho,
        tis_weight: tis_weight(rec.logp_ref, rec.logp_inf, tis_c)?,
        tis_adjusted_weight: tis_adjusted_weight(rec.logp_new, rec.logp_inf, tis_c)?,
    })
}

/// Top-k normalizer estimate for every record.
pub fn batch_z_approx(batch: &[TokenRecord], cfg: &JackpotConfig) -> Result<Vec<f64>> {
    let params = cfg.params()?;
    batch
        .par_iter()
        .map(|rec| {
            let inf = rec.topk_inf.truncate(cfg.top_k.min(rec.topk_inf.k()))?;
            let new = rec.topk_new.truncate(cfg.top_k.min(rec.topk_new.k()))?;
            Ok(z_topk_approx(&inf, &new, params).z_approx)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights {
    pub weights: Vec<TokenWeights>,
    pub calibration: BatchCalibration,
    /// Mask draws before the masking switch is applied.
    pub raw_accepted: u64,
}

/// Masks, calibration and weights for a batch with caller-supplied
/// per-token normalizer estimates.
pub fn batch_weights_with_z(
    batch: &[TokenRecord],
    z_approx: &[f64],
    cfg: &JackpotConfig,
    tis_c: f64,
) -> Result<BatchWeights> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if z_approx.len() != batch.len() {
        return Err(Error::LengthMismatch {
            what: "z_approx",
            expected: batch.len(),
            got: z_approx.len(),
        });
    }
    cfg.validate()?;
    check_tis_c(tis_c)?;
    let stream = KeyedStream::new(cfg.mask_seed);
    let draws: Vec<(u8, f64)> = batch
        .par_iter()
        .map(|rec| keyed_mask(&stream, rec, cfg))
        .collect::<Result<_>>()?;
    let raw_accepted = draws.iter().map(|&(m, _)| u64::from(m)).sum::<u64>();
    let calibration = match cfg.calibration {
        Calibration::Batch => calibrate(z_approx, batch.len() as u64, raw_accepted)?,
        Calibration::Counts { proposed, accepted } => calibrate(z_approx, proposed, accepted)?,
        Calibration::Disabled => {
            crate::error::check_finite("z_approx values", z_approx)?;
            BatchCalibration::identity(z_approx.iter().sum::<f64>() / z_approx.len() as f64)
        }
    };
    let weights = batch
        .par_iter()
        .zip(z_approx)
        .zip(&draws)
        .map(|((rec, &z), &(mask, a))| {
            weight_from_parts(rec, cfg, calibration.corrected(z), tis_c, mask, a)
        })
        .collect::<Result<_>>()?;
    Ok(BatchWeights {
        weights,
        calibration,
        raw_accepted,
    })
}

/// Full pipeline with top-k normalizer estimates taken from the records.
pub fn batch_weights(batch: &[TokenRecord], cfg: &JackpotConfig, tis_c: f64) -> Result<BatchWeights> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let z = batch_z_approx(batch, cfg)?;
    batch_weights_with_z(batch, &z, cfg, tis_c)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::categorical::{top_k, Categorical};

    /// Record for `token` where the three policies are full distributions.
    pub(crate) fn record_from(
        token: usize,
        p_inf: &Categorical,
        p_ref: &Categorical,
        p_new: &Categorical,
        k: usize,
    ) -> TokenRecord {
        TokenRecord {
            token_id: token,
            logp_inf: p_inf.log_prob(token),
            logp_ref: p_ref.log_prob(token),
            logp_new: p_new.log_prob(token),
            topk_inf: top_k(p_inf, k).unwrap(),
            topk_new: top_k(p_new, k).unwrap(),
            advantage: 1.0,
            group_id: 0,
            position: 0,
            trajectory_id: 0,
        }
    }

    fn cat(p: &[f64]) -> Categorical {
        Categorical::from_probs(p).unwrap()
    }

    fn worked_example() -> TokenRecord {
        let p_inf = cat(&[0.5, 0.3, 0.2]);
        let p_new = cat(&[0.2, 0.3, 0.5]);
        let p_ref = cat(&[0.25, 0.25, 0.5]);
        record_from(0, &p_inf, &p_ref, &p_new, 3)
    }

    #[test]
    fn matched_token_always_kept() {
        let p = cat(&[0.5, 0.3, 0.2]);
        let cfg = JackpotConfig::default();
        for t in 0..3 {
            let mut rec = record_from(t, &p, &p, &p, 3);
            for pos in 0..50 {
                rec.position = pos;
                assert_eq!(bernoulli_mask(&rec, &cfg).unwrap(), (1, 1.0));
            }
        }
    }

    #[test]
    fn mask_is_keyed() {
        let rec = worked_example();
        let cfg = JackpotConfig {
            mask_seed: 9,
            ..Default::default()
        };
        let (_, a) = bernoulli_mask(&rec, &cfg).unwrap();
        assert!((a - 0.4).abs() < 1e-12);
        let first: Vec<u8> = (0..64)
            .map(|pos| bernoulli_mask(&TokenRecord { position: pos, ..rec.clone() }, &cfg).unwrap().0)
            .collect();
        let again: Vec<u8> = (0..64)
            .rev()
            .map(|pos| bernoulli_mask(&TokenRecord { position: pos, ..rec.clone() }, &cfg).unwrap().0)
            .collect();
        assert_eq!(first, again.into_iter().rev().collect::<Vec<_>>());
    }

    #[test]
    fn weight_worked_example() {
        let rec = worked_example();
        let cfg = JackpotConfig {
            c1: 3.0,
            c2: 3.0,
            ..Default::default()
        };
        let w = jackpot_weight(&rec, &cfg, 0.7, 2.0).unwrap();
        assert!((w.w_obrs - 0.7).abs() < 1e-12);
        // Identity with the post-rejection distribution: 0.2 / (2/7).
        assert!((w.w_obrs - 0.2 / (2.0 / 7.0)).abs() < 1e-12);
        assert!((w.rho - 0.875).abs() < 1e-12);
        assert!((w.tis_weight - 0.5).abs() < 1e-12);
        assert!((w.tis_adjusted_weight - 0.4).abs() < 1e-12);
    }

    #[test]
    fn weight_on_policy_fixed_point() {
        let p = cat(&[0.5, 0.3, 0.2]);
        let rec = record_from(1, &p, &p, &p, 3);
        let w = jackpot_weight(&rec, &JackpotConfig::default(), 1.0, 2.0).unwrap();
        assert_eq!((w.mask, w.w_obrs, w.rho), (1, 1.0, 1.0));
    }

    #[test]
    fn weight_forms_and_switches() {
        let rec = worked_example();
        let base = JackpotConfig {
            c1: 1.0,
            c2: 1.1,
            ..Default::default()
        };
        let sep = jackpot_weight(&rec, &base, 2.0, 2.0).unwrap();
        // min(2·1, 1) · min(1.25, 1.1)
        assert!((sep.rho - 1.1).abs() < 1e-12);
        let comp = jackpot_weight(
            &rec,
            &JackpotConfig {
                weight_form: WeightForm::Composed,
                ..base.clone()
            },
            2.0,
            2.0,
        )
        .unwrap();
        assert!((comp.rho - 1.25).abs() < 1e-12);
        let no_rw = jackpot_weight(
            &rec,
            &JackpotConfig {
                reweighting: false,
                ..base.clone()
            },
            2.0,
            2.0,
        )
        .unwrap();
        assert!((no_rw.rho - 1.1).abs() < 1e-12);
        assert!((no_rw.w_obrs - 2.0).abs() < 1e-12);
        let no_mask = JackpotConfig {
            masking: false,
            ..base
        };
        for pos in 0..32 {
            let r = TokenRecord { position: pos, ..rec.clone() };
            assert_eq!(jackpot_weight(&r, &no_mask, 1.0, 2.0).unwrap().mask, 1);
        }
    }

    #[test]
    fn reference_target() {
        let rec = worked_example();
        let cfg = JackpotConfig {
            target_policy: TargetPolicy::Reference,
            ..Default::default()
        };
        let w = jackpot_weight(&rec, &cfg, 1.0, 2.0).unwrap();
        assert!((w.accept_prob - 0.5).abs() < 1e-12);
        // The reference correction is 1 when the target is the reference.
        assert!((w.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_rejects_bad_z() {
        let rec = worked_example();
        assert!(jackpot_weight(&rec, &JackpotConfig::default(), -0.1, 2.0).is_err());
        assert!(jackpot_weight(&rec, &JackpotConfig::default(), f64::NAN, 2.0).is_err());
        let w = jackpot_weight(&rec, &JackpotConfig::default(), 0.0, 2.0).unwrap();
        assert_eq!((w.w_obrs, w.rho), (0.0, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(JackpotConfig::default().validate().is_ok());
        assert!(JackpotConfig { c1: 0.5, ..Default::default() }.validate().is_err());
        assert!(JackpotConfig { c2: 0.9, ..Default::default() }.validate().is_err());
        assert!(JackpotConfig { top_k: 0, ..Default::default() }.validate().is_err());
        assert!(JackpotConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(default_c2(0.28), 1.28);
        assert!((default_c2(0.2) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn record_validation() {
        let mut rec = worked_example();
        assert!(rec.validate(0).is_ok());
        rec.logp_new = 0.5;
        assert!(matches!(rec.validate(3), Err(Error::InvalidRecord { index: 3, .. })));
        let mut rec = worked_example();
        rec.logp_inf = (0.45f64).ln();
        assert!(rec.validate(0).is_err());
        let mut rec = worked_example();
        rec.logp_ref = f64::NEG_INFINITY;
        assert!(rec.validate(0).is_err());
    }

    #[test]
    fn batch_pipeline_counts_masks() {
        let p_inf = cat(&[0.5, 0.3, 0.2]);
        let p_new = cat(&[0.2, 0.3, 0.5]);
        let batch: Vec<TokenRecord> = (0..400)
            .map(|i| TokenRecord {
                trajectory_id: i / 4,
                position: i % 4,
                ..record_from((i % 3) as usize, &p_inf, &p_new, &p_new, 3)
            })
            .collect();
        let out = batch_weights(&batch, &JackpotConfig::default(), 2.0).unwrap();
        let kept = out.weights.iter().filter(|w| w.mask == 1).count() as u64;
        assert_eq!(kept, out.raw_accepted);
        assert_eq!(out.calibration.accepted, kept);
        assert_eq!(out.calibration.proposed, 400);
        assert!(batch_weights(&[], &JackpotConfig::default(), 2.0).is_err());
    }
}

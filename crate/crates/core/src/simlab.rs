//! Simulation sweeps over synthetic Dirichlet pairs: how much acceptance
//! rate OBRS keeps, and how much of `KL(p ‖ q)` it removes, as the proposal
//! drifts from the target.

use std::io::Write;

use rayon::prelude::*;

use crate::categorical::{dirichlet_pair, kl_divergence, SimPairConfig};
use crate::error::{Error, Result};
use crate::obrs::{post_rejection, ratio_range, ObrsParams};
use crate::rng::derive_seed;

/// Slack allowed when checking `KL(p ‖ q̃) ≤ KL(p ‖ q)`.
pub const CONTRACTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub vocab_size: usize,
    pub dirichlet_alpha: f64,
    pub noise_grid: Vec<f64>,
    pub lambda: f64,
    pub trials_per_level: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            vocab_size: 10_000,
            dirichlet_alpha: 1.0,
            noise_grid: vec![0.0, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0],
            lambda: 1.0,
            trials_per_level: 100,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_grid.is_empty() {
            return Err(Error::InvalidParameter {
                name: "noise_grid",
                value: f64::NAN,
                reason: "must not be empty",
            });
        }
        for &eta in &self.noise_grid {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "noise_grid",
                    value: eta,
                    reason: "noise levels must be non-negative and finite",
                });
            }
        }
        if self.trials_per_level == 0 {
            return Err(Error::InvalidParameter {
                name: "trials_per_level",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        ObrsParams::new(self.lambda)?;
        self.pair_config(0.0, 0).validate()
    }

    fn pair_config(&self, eta: f64, trial: usize) -> SimPairConfig {
        // The seed depends on the trial only, so every noise level perturbs
        // the same target with the same standard-normal draws.
        SimPairConfig {
            vocab_size: self.vocab_size,
            dirichlet_alpha: self.dirichlet_alpha,
            noise_scale: eta,
            seed: derive_seed(self.seed, 0, trial as u64),
        }
    }

    fn jobs(&self) -> Vec<(f64, usize)> {
        self.noise_grid
            .iter()
            .flat_map(|&eta| (0..self.trials_per_level).map(move |t| (eta, t)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRow {
    pub eta: f64,
    pub trial: usize,
    pub lambda: f64,
    pub kl_pq: f64,
    pub z: f64,
    pub kl_post: f64,
    /// `kl_post / kl_pq`, or 1 when `kl_pq = 0`.
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub eta: f64,
    pub kl_pq_median: f64,
    pub acceptance_rate_median: f64,
    pub kl_reduced_median: f64,
    pub reduction_ratio_median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub trials: Vec<TrialRow>,
}

/// A λ value, either absolute or relative to a pair's ratio range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPoint {
    Value(f64),
    /// `factor · min p/q`; a factor ≤ 1 means no rejection.
    TimesMinRatio(f64),
    /// `factor · max p/q`; a factor ≥ 1 is classical rejection sampling.
    TimesMaxRatio(f64),
}

impl LambdaPoint {
    fn resolve(&self, min_ratio: f64, max_ratio: f64) -> f64 {
        match *self {
            LambdaPoint::Value(v) => v,
            LambdaPoint::TimesMinRatio(f) => f * min_ratio,
            LambdaPoint::TimesMaxRatio(f) => f * max_ratio,
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn trial_row(p: &crate::categorical::Categorical, q: &crate::categorical::Categorical, eta: f64, trial: usize, lambda: f64) -> Result<TrialRow> {
    let kl_pq = kl_divergence(p, q)?;
    let post = post_rejection(p, q, ObrsParams::new(lambda)?)?;
    let kl_post = kl_divergence(p, &post.kept_dist)?;
    if kl_post > kl_pq + CONTRACTION_TOL {
        return Err(Error::InvariantViolation(format!(
            "eta {eta} trial {trial} lambda {lambda}: KL after rejection {kl_post} exceeds {kl_pq}"
        )));
    }
    Ok(TrialRow {
        eta,
        trial,
        lambda,
        kl_pq,
        z: post.z,
        kl_post,
        ratio: if kl_pq > 0.0 { kl_post / kl_pq } else { 1.0 },
    })
}

fn summarize(noise_grid: &[f64], trials: &[TrialRow], per_level: usize) -> Vec<SweepRow> {
    noise_grid
        .iter()
        .zip(trials.chunks(per_level))
        .map(|(&eta, chunk)| {
            let col = |f: fn(&TrialRow) -> f64| median(&mut chunk.iter().map(f).collect::<Vec<_>>());
            SweepRow {
                eta,
                kl_pq_median: col(|r| r.kl_pq),
                acceptance_rate_median: col(|r| r.z),
                kl_reduced_median: col(|r| r.kl_post),
                reduction_ratio_median: col(|r| r.ratio),
            }
        })
        .collect()
}

/// Acceptance rate and post-rejection KL at `cfg.lambda` for every noise
/// level. Fails on the first pair whose KL grows.
pub fn sweep_acceptance_vs_kl(cfg: &SweepConfig) -> Result<Sweep> {
    cfg.validate()?;
    let trials: Vec<TrialRow> = cfg
        .jobs()
        .into_par_iter()
        .map(|(eta, trial)| {
            let (p, q) = dirichlet_pair(&cfg.pair_config(eta, trial))?;
            trial_row(&p, &q, eta, trial, cfg.lambda)
        })
        .collect::<Result<_>>()?;
    let rows = summarize(&cfg.noise_grid, &trials, cfg.trials_per_level);
    Ok(Sweep { rows, trials })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSweep {
    pub points: Vec<LambdaPoint>,
    /// Ordered by noise level, then trial, then grid point.
    pub trials: Vec<TrialRow>,
    /// One summary per `(noise level, grid point)`, in the same order.
    pub rows: Vec<(LambdaPoint, SweepRow)>,
}

/// Post-rejection KL for every grid point on every pair. The reduction
/// ratio must be non-increasing in the resolved `λ` within each trial.
pub fn sweep_kl_reduction(cfg: &SweepConfig, points: &[LambdaPoint]) -> Result<LambdaSweep> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidParameter {
            name: "lambda_grid",
            value: f64::NAN,
            reason: "must not be empty",
        });
    }
    let per_trial: Vec<Vec<TrialRow>> = cfg
        .jobs()
        .into_par_iter()
        .map(|(eta, trial)| {
            let (p, q) = dirichlet_pair(&cfg.pair_config(eta, trial))?;
            let (lo, hi) = ratio_range(&p, &q)?;
            let rows = points
                .iter()
                .map(|pt| {
                    let lambda = pt.resolve(lo, hi);
                    if !(lambda > 0.0 && lambda.is_finite()) {
                        return Err(Error::InvalidParameter {
                            name: "lambda_grid",
                            value: lambda,
                            reason: "resolved lambda must be positive and finite",
                        });
                    }
                    trial_row(&p, &q, eta, trial, lambda)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut sorted = rows.clone();
            sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
            for w in sorted.windows(2) {
                if w[1].kl_post > w[0].kl_post + CONTRACTION_TOL {
                    return Err(Error::InvariantViolation(format!(
                        "eta {eta} trial {trial}: KL rises from {} at lambda {} to {} at lambda {}",
                        w[0].kl_post, w[0].lambda, w[1].kl_post, w[1].lambda
                    )));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let n_pts = points.len();
    let mut rows = Vec::with_capacity(cfg.noise_grid.len() * n_pts);
    for (level, &eta) in cfg.noise_grid.iter().enumerate() {
        let chunk = &per_trial[level * cfg.trials_per_level..(level + 1) * cfg.trials_per_level];
        for (j, &pt) in points.iter().enumerate() {
            let column: Vec<TrialRow> = chunk.iter().map(|r| r[j]).collect();
            rows.push((pt, summarize(&[eta], &column, column.len())[0]));
        }
    }
    Ok(LambdaSweep {
        points: points.to_vec(),
        trials: per_trial.into_iter().flatten().collect(),
        rows,
    })
}

pub const TRIAL_CSV_HEADER: &str = "eta,trial,kl_pq,z,kl_post,ratio";
pub const LAMBDA_CSV_HEADER: &str = "eta,trial,lambda,kl_pq,z,kl_post,ratio";

pub fn write_trials_csv<W: Write>(mut out: W, trials: &[TrialRow]) -> Result<()> {
    writeln!(out, "{TRIAL_CSV_HEADER}")?;
    for r in trials {
        writeln!(out, "{},{},{},{},{},{}", r.eta, r.trial, r.kl_pq, r.z, r.kl_post, r.ratio)?;
    }
    Ok(())
}

pub fn write_lambda_csv<W: Write>(mut out: W, trials: &[TrialRow]) -> Result<()> {
    writeln!(out, "{LAMBDA_CSV_HEADER}")?;
    for r in trials {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.eta, r.trial, r.lambda, r.kl_pq, r.z, r.kl_post, r.ratio
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categorical::total_variation;

    fn small() -> SweepConfig {
        SweepConfig {
            vocab_size: 64,
            noise_grid: vec![0.0, 0.5, 2.0],
            trials_per_level: 7,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_rows() {
        let sweep = sweep_acceptance_vs_kl(&small()).unwrap();
        let row = sweep.rows[0];
        assert_eq!((row.kl_pq_median, row.acceptance_rate_median, row.kl_reduced_median), (0.0, 1.0, 0.0));
    }

    #[test]
    fn acceptance_at_one_is_one_minus_tv() {
        let cfg = small();
        let sweep = sweep_acceptance_vs_kl(&cfg).unwrap();
        for t in &sweep.trials {
            let (p, q) = dirichlet_pair(&cfg.pair_config(t.eta, t.trial)).unwrap();
            assert!((t.z - (1.0 - total_variation(&p, &q).unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let a = sweep_acceptance_vs_kl(&small()).unwrap();
        let b = sweep_acceptance_vs_kl(&small()).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_trials_csv(&mut buf_a, &a.trials).unwrap();
        write_trials_csv(&mut buf_b, &b.trials).unwrap();
        assert_eq!(buf_a, buf_b);
        assert!(String::from_utf8(buf_a).unwrap().starts_with("eta,trial,kl_pq,z,kl_post,ratio\n"));
        let order: Vec<(f64, usize)> = a.trials.iter().map(|t| (t.eta, t.trial)).collect();
        assert_eq!(order, small().jobs());
    }

    #[test]
    fn lambda_sweep_limits() {
        let points = [
            LambdaPoint::TimesMinRatio(0.5),
            LambdaPoint::Value(1.0),
            LambdaPoint::TimesMaxRatio(1.0),
        ];
        let sweep = sweep_kl_reduction(&small(), &points).unwrap();
        for chunk in sweep.trials.chunks(3) {
            if chunk[0].kl_pq == 0.0 {
                continue;
            }
            assert_eq!(chunk[0].ratio, 1.0);
            assert!(chunk[1].ratio > 0.0 && chunk[1].ratio < 1.0);
            assert!(chunk[2].ratio < 1e-12);
        }
        assert_eq!(sweep.rows.len(), 9);
    }

    #[test]
    fn config_errors() {
        assert!(sweep_acceptance_vs_kl(&SweepConfig { noise_grid: vec![], ..small() }).is_err());
        assert!(sweep_acceptance_vs_kl(&SweepConfig { noise_grid: vec![-1.0], ..small() }).is_err());
        assert!(sweep_acceptance_vs_kl(&SweepConfig { trials_per_level: 0, ..small() }).is_err());
        assert!(sweep_acceptance_vs_kl(&SweepConfig { lambda: 0.0, ..small() }).is_err());
        assert!(sweep_kl_reduction(&small(), &[]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

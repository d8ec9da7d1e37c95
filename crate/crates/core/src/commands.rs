//! Command implementations behind the `obrs-align` binary.
//!
//! Each command returns its standard-output text; failures come back as
//! [`Error`] and map to exit codes through [`exit_code`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::categorical::{dirichlet_pair, Categorical, SimPairConfig};
use crate::config::RunConfig;
use crate::correction::{batch_weights, batch_weights_with_z, batch_z_approx, JackpotConfig, TokenRecord};
use crate::error::{Error, Result};
use crate::obrs::{post_rejection, solve_lambda_for_budget, ObrsParams};
use crate::oracles::{verify_obrs_optimality, ORACLE_MAX_VOCAB};
use crate::output::write_atomic;
use crate::rng::derive_seed;
use crate::simlab::{median, sweep_acceptance_vs_kl, sweep_kl_reduction, write_lambda_csv, write_trials_csv, LambdaPoint};
use crate::toy::{train, RunMetrics, Scheme};
use crate::trace::read_trace_file;
use crate::z_estimator::z_error_report;

/// 0 success, 1 usage or input error, 2 violated invariant.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvariantViolation(_) | Error::AllMasked => 2,
        _ => 1,
    }
}

/// Where a command's configuration comes from.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    /// Value of `OBRS_ALIGN_SEED`, if set.
    pub env_seed: Option<String>,
    pub seed: Option<u64>,
}

impl ConfigSource {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.path.as_deref(), self.env_seed.as_deref(), self.seed)
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub config: ConfigSource,
    pub out: PathBuf,
    /// Also runs the λ sweep and writes it here.
    pub lambda_out: Option<PathBuf>,
}

pub fn simulate(args: &SimulateArgs) -> Result<String> {
    let cfg = args.config.resolve()?;
    let sweep = sweep_acceptance_vs_kl(&cfg.sim)?;
    let mut report = String::from("eta      median_kl    median_z     median_kl_post  median_ratio\n");
    for r in &sweep.rows {
        writeln!(
            report,
            "{:<8} {:<12.6e} {:<12.6} {:<15.6e} {:.6}",
            r.eta, r.kl_pq_median, r.acceptance_rate_median, r.kl_reduced_median, r.reduction_ratio_median
        )
        .expect("infallible");
    }
    let lambda_csv = match &args.lambda_out {
        Some(path) => {
            let points = if cfg.sim_lambda_points.is_empty() {
                vec![LambdaPoint::Value(1.0), LambdaPoint::TimesMaxRatio(1.0)]
            } else {
                cfg.sim_lambda_points.clone()
            };
            let ls = sweep_kl_reduction(&cfg.sim, &points)?;
            writeln!(report, "lambda sweep: {} points", points.len()).expect("infallible");
            Some((path, csv_bytes(|b| write_lambda_csv(b, &ls.trials))?))
        }
        None => None,
    };
    write_atomic(&args.out, &csv_bytes(|b| write_trials_csv(b, &sweep.trials))?)?;
    if let Some((path, bytes)) = lambda_csv {
        write_atomic(path, &bytes)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    /// Fixed vocabulary size; sizes cycle through 3..=10 when absent.
    pub size: Option<usize>,
    pub instances: usize,
    pub budgets: Vec<f64>,
    pub tol: f64,
    pub perturbations: usize,
    pub seed: u64,
    /// Use the 3-token pair `p = [0.2, 0.3, 0.5]`, `q = [0.5, 0.3, 0.2]`.
    pub fixed_pair: bool,
}

impl Default for VerifyArgs {
    fn default() -> Self {
        Self {
            size: None,
            instances: 200,
            budgets: vec![0.3, 0.5, 0.8],
            tol: 1e-6,
            perturbations: 1000,
            seed: 0,
            fixed_pair: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySummary {
    pub cases: usize,
    pub failures: usize,
    pub worst_oracle_gap: f64,
    pub worst_perturbation_margin: f64,
}

fn verify_pair(args: &VerifyArgs, i: usize) -> Result<(Categorical, Categorical)> {
    if args.fixed_pair {
        return Ok((
            Categorical::from_probs(&[0.2, 0.3, 0.5])?,
            Categorical::from_probs(&[0.5, 0.3, 0.2])?,
        ));
    }
    let size = args.size.unwrap_or(3 + i % 8);
    dirichlet_pair(&SimPairConfig {
        vocab_size: size,
        dirichlet_alpha: 1.0,
        noise_scale: 1.0,
        seed: derive_seed(args.seed, 2, i as u64),
    })
}

/// Runs the oracle suite; returns the report and the summary.
pub fn verify_run(args: &VerifyArgs) -> Result<(String, VerifySummary)> {
    if let Some(size) = args.size {
        if !(2..=ORACLE_MAX_VOCAB).contains(&size) {
            return Err(Error::OracleTooLarge {
                size,
                max: ORACLE_MAX_VOCAB,
            });
        }
    }
    if args.instances == 0 || args.budgets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(args.tol >= 0.0 && args.tol.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "tol",
            value: args.tol,
            reason: "must be non-negative and finite",
        });
    }
    let cases: Vec<(usize, f64)> = (0..args.instances)
        .flat_map(|i| args.budgets.iter().map(move |&b| (i, b)))
        .collect();
    let results: Vec<(usize, crate::oracles::OptimalityReport, bool)> = cases
        .par_iter()
        .map(|&(i, budget)| {
            let (p, q) = verify_pair(args, i)?;
            let rep = verify_obrs_optimality(&p, &q, budget, args.tol, args.perturbations, derive_seed(args.seed, 3, i as u64))?;
            // A unit budget must accept everything.
            let full_accept = budget < 1.0
                || post_rejection(&p, &q, solve_lambda_for_budget(&p, &q, budget)?)?
                    .accept_probs
                    .iter()
                    .all(|&a| a >= 1.0 - 1e-12);
            Ok((i, rep, full_accept))
        })
        .collect::<Result<_>>()?;

    let mut report = String::new();
    let mut summary = VerifySummary {
        cases: results.len(),
        failures: 0,
        worst_oracle_gap: f64::NEG_INFINITY,
        worst_perturbation_margin: f64::INFINITY,
    };
    for (i, rep, full_accept) in &results {
        let ok = rep.passed && *full_accept;
        if !ok {
            summary.failures += 1;
            writeln!(
                report,
                "FAIL instance {i} budget {}: gap {:.3e} margin {:.3e} deviation {:.3e}",
                rep.budget, rep.oracle_gap, rep.worst_perturbation_margin, rep.uniqueness_deviation
            )
            .expect("infallible");
        }
        if args.fixed_pair || args.instances == 1 {
            writeln!(
                report,
                "instance {i} budget {} lambda {:.12} kl {:.12}",
                rep.budget, rep.lambda, rep.obrs_kl
            )
            .expect("infallible");
        }
        summary.worst_oracle_gap = summary.worst_oracle_gap.max(rep.oracle_gap);
        summary.worst_perturbation_margin = summary.worst_perturbation_margin.min(rep.worst_perturbation_margin);
    }
    writeln!(
        report,
        "{} cases, {} failures, worst oracle gap {:.3e}, worst KL margin {:.3e}",
        summary.cases, summary.failures, summary.worst_oracle_gap, summary.worst_perturbation_margin
    )
    .expect("infallible");
    Ok((report, summary))
}

/// [`verify_run`] with failures turned into an invariant violation.
pub fn verify(args: &VerifyArgs) -> Result<String> {
    let (report, summary) = verify_run(args)?;
    if summary.failures > 0 {
        return Err(Error::InvariantViolation(report));
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ZbenchArgs {
    pub config: ConfigSource,
    /// Trace to analyse; synthetic Dirichlet pairs when absent.
    pub trace: Option<PathBuf>,
    pub ks: Vec<usize>,
    pub vocab_size: usize,
    pub pairs: usize,
    pub eta: f64,
    /// Use the 4-token pair `p_inf = [0.4, 0.3, 0.2, 0.1]`, `p_new` reversed.
    pub example: bool,
    pub out: Option<PathBuf>,
}

impl Default for ZbenchArgs {
    fn default() -> Self {
        Self {
            config: ConfigSource::default(),
            trace: None,
            ks: vec![1, 5, 10, 20, 40],
            vocab_size: 1000,
            pairs: 20,
            eta: 1.0,
            example: false,
            out: None,
        }
    }
}

fn zbench_synthetic(args: &ZbenchArgs, cfg: &RunConfig) -> Result<(String, String)> {
    let params = ObrsParams::new(cfg.jackpot.lambda)?;
    let pairs: Vec<(Categorical, Categorical)> = if args.example {
        vec![(
            Categorical::from_probs(&[0.1, 0.2, 0.3, 0.4])?,
            Categorical::from_probs(&[0.4, 0.3, 0.2, 0.1])?,
        )]
    } else {
        (0..args.pairs)
            .map(|i| {
                dirichlet_pair(&SimPairConfig {
                    vocab_size: args.vocab_size,
                    dirichlet_alpha: 1.0,
                    noise_scale: args.eta,
                    seed: derive_seed(cfg.seed, 4, i as u64),
                })
            })
            .collect::<Result<_>>()?
    };
    let mut ks = args.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let reports: Vec<Vec<crate::z_estimator::ZErrorRow>> = pairs
        .par_iter()
        .map(|(p, q)| z_error_report(p, q, params, &ks))
        .collect::<Result<_>>()?;
    let mut csv = String::from("k,mean_z_approx,mean_z_exact,mean_fraction,min_fraction\n");
    let mut table = String::from("k      z_approx     z_exact      fraction     min_fraction\n");
    for (j, &k) in ks.iter().enumerate() {
        let n = reports.len() as f64;
        let za = reports.iter().map(|r| r[j].z_approx).sum::<f64>() / n;
        let ze = reports.iter().map(|r| r[j].z_exact).sum::<f64>() / n;
        let fr = reports.iter().map(|r| r[j].fraction).sum::<f64>() / n;
        let min = reports.iter().map(|r| r[j].fraction).fold(f64::INFINITY, f64::min);
        writeln!(csv, "{k},{za},{ze},{fr},{min}").expect("infallible");
        writeln!(table, "{k:<6} {za:<12.6} {ze:<12.6} {fr:<12.6} {min:.6}").expect("infallible");
    }
    Ok((table, csv))
}

fn zbench_trace(path: &Path, args: &ZbenchArgs, cfg: &RunConfig) -> Result<(String, String)> {
    let records = read_trace_file(path)?;
    let mut csv = String::from("k,mean_z_approx,alpha_hat,kappa,kappa_clamped\n");
    let mut table = String::from("k      mean_z_approx  alpha_hat    kappa        clamped\n");
    for &k in &args.ks {
        let jcfg = JackpotConfig {
            top_k: k,
            ..cfg.jackpot.clone()
        };
        let z = batch_z_approx(&records, &jcfg)?;
        let cal = batch_weights_with_z(&records, &z, &jcfg, cfg.loss.tis_c)?.calibration;
        writeln!(csv, "{k},{},{},{},{}", cal.mean_z_approx, cal.alpha_hat, cal.kappa, cal.clamped).expect("infallible");
        writeln!(
            table,
            "{k:<6} {:<14.6} {:<12.6} {:<12.6} {}",
            cal.mean_z_approx, cal.alpha_hat, cal.kappa, cal.clamped
        )
        .expect("infallible");
    }
    Ok((table, csv))
}

pub fn zbench(args: &ZbenchArgs) -> Result<String> {
    let cfg = args.config.resolve()?;
    if args.ks.is_empty() {
        return Err(Error::KOutOfRange { k: 0, vocab: 0 });
    }
    let (table, csv) = match &args.trace {
        Some(path) => zbench_trace(path, args, &cfg)?,
        None => zbench_synthetic(args, &cfg)?,
    };
    if let Some(out) = &args.out {
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct TrainToyArgs {
    pub config: ConfigSource,
    pub out_dir: PathBuf,
    pub scheme: Option<Scheme>,
    pub seeds: Option<usize>,
    pub steps: Option<usize>,
    pub staleness: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub scheme: String,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub staleness: usize,
    pub final_rewards: Vec<f64>,
    pub collapsed: Vec<bool>,
    pub collapse_count: usize,
    pub mean_final_reward: f64,
}

fn metrics_jsonl(run: &RunMetrics) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for s in &run.steps {
        serde_json::to_writer(&mut buf, s).map_err(|e| Error::InvariantViolation(e.to_string()))?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn train_toy(args: &TrainToyArgs) -> Result<(String, TrainSummary)> {
    let cfg = args.config.resolve()?;
    let mut tcfg = cfg.toy.clone();
    if let Some(s) = args.scheme {
        tcfg.scheme = s;
    }
    if let Some(n) = args.steps {
        tcfg.steps = n;
    }
    if let Some(s) = args.staleness {
        tcfg.staleness = s;
    }
    tcfg.validate()?;
    let n_seeds = args.seeds.unwrap_or(cfg.toy_seeds);
    if n_seeds == 0 {
        return Err(Error::InvalidParameter {
            name: "seeds",
            value: 0.0,
            reason: "must be at least 1",
        });
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.seed + i).collect();
    let runs: Vec<RunMetrics> = seeds.par_iter().map(|&s| train(&tcfg, s)).collect::<Result<_>>()?;
    if train(&tcfg, seeds[0])? != runs[0] {
        return Err(Error::InvariantViolation(format!(
            "re-running seed {} did not reproduce its metrics",
            seeds[0]
        )));
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let name = tcfg.scheme.name();
    for run in &runs {
        let path = args.out_dir.join(format!("{name}_seed{}.jsonl", run.seed));
        write_atomic(&path, &metrics_jsonl(run)?)?;
    }
    let finals: Vec<f64> = runs.iter().map(|r| r.final_reward).collect();
    let summary = TrainSummary {
        scheme: name.to_string(),
        seeds: seeds.clone(),
        steps: tcfg.steps,
        staleness: tcfg.staleness,
        collapsed: runs.iter().map(|r| r.collapsed).collect(),
        collapse_count: runs.iter().filter(|r| r.collapsed).count(),
        mean_final_reward: finals.iter().sum::<f64>() / finals.len() as f64,
        final_rewards: finals,
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::InvariantViolation(e.to_string()))?;
    write_atomic(&args.out_dir.join(format!("{name}_summary.json")), &json)?;

    let mut report = String::new();
    for run in &runs {
        writeln!(
            report,
            "{name} seed {}: final reward {:.4}{}",
            run.seed,
            run.final_reward,
            if run.collapsed { " (collapsed)" } else { "" }
        )
        .expect("infallible");
    }
    writeln!(
        report,
        "mean final reward {:.4}, {} of {} collapsed",
        summary.mean_final_reward,
        summary.collapse_count,
        runs.len()
    )
    .expect("infallible");
    Ok((report, summary))
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub config: ConfigSource,
    pub trace: PathBuf,
    pub out_csv: PathBuf,
    pub out_json: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoQuantiles {
    pub min: f64,
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub tokens: usize,
    pub survivors: usize,
    pub proposed: u64,
    pub accepted: u64,
    pub alpha_hat: f64,
    pub mean_z_approx: f64,
    pub kappa: f64,
    pub kappa_clamped: bool,
    /// Mean per-token acceptance probability.
    pub acceptance_rate: f64,
    /// Quantiles of `rho` over surviving tokens.
    pub rho: RhoQuantiles,
}

/// Nearest-rank quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub const WEIGHTS_CSV_HEADER: &str = "index,token_id,mask,accept_prob,z_corrected,w_obrs,rho,tis_weight,tis_adjusted_weight";

pub fn analyze_trace_records(records: &[TokenRecord], cfg: &RunConfig) -> Result<(String, TraceSummary)> {
    let out = batch_weights(records, &cfg.jackpot, cfg.loss.tis_c)?;
    let mut csv = String::with_capacity(records.len() * 160);
    csv.push_str(WEIGHTS_CSV_HEADER);
    csv.push('\n');
    for (i, (rec, w)) in records.iter().zip(&out.weights).enumerate() {
        writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{}",
            rec.token_id, w.mask, w.accept_prob, w.z_corrected, w.w_obrs, w.rho, w.tis_weight, w.tis_adjusted_weight
        )
        .expect("infallible");
    }
    let mut rho: Vec<f64> = out.weights.iter().filter(|w| w.mask == 1).map(|w| w.rho).collect();
    if rho.is_empty() {
        return Err(Error::AllMasked);
    }
    rho.sort_by(f64::total_cmp);
    let cal = &out.calibration;
    let summary = TraceSummary {
        tokens: records.len(),
        survivors: rho.len(),
        proposed: cal.proposed,
        accepted: cal.accepted,
        alpha_hat: cal.alpha_hat,
        mean_z_approx: cal.mean_z_approx,
        kappa: cal.kappa,
        kappa_clamped: cal.clamped,
        acceptance_rate: out.weights.iter().map(|w| w.accept_prob).sum::<f64>() / records.len() as f64,
        rho: RhoQuantiles {
            min: rho[0],
            p05: quantile(&rho, 0.05),
            p25: quantile(&rho, 0.25),
            p50: median(&mut rho.clone()),
            p75: quantile(&rho, 0.75),
            p95: quantile(&rho, 0.95),
            max: rho[rho.len() - 1],
        },
    };
    Ok((csv, summary))
}

pub fn analyze_trace(args: &AnalyzeArgs) -> Result<String> {
    let cfg = args.config.resolve()?;
    let records = read_trace_file(&args.trace)?;
    let (csv, summary) = analyze_trace_records(&records, &cfg)?;
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::InvariantViolation(e.to_string()))?;
    write_atomic(&args.out_csv, csv.as_bytes())?;
    write_atomic(&args.out_json, &json)?;
    Ok(format!(
        "{} tokens, {} survivors, alpha_hat {:.6}, kappa {:.6}, median rho {:.6}\n",
        summary.tokens, summary.survivors, summary.alpha_hat, summary.kappa, summary.rho.p50
    ))
}

//! Acceptance rate and KL reduction across noise levels for Dirichlet pairs.

use obrs_align::simlab::{sweep_acceptance_vs_kl, sweep_kl_reduction, LambdaPoint, SweepConfig};

fn main() -> obrs_align::Result<()> {
    let cfg = SweepConfig {
        vocab_size: 1000,
        noise_grid: vec![0.1, 0.5, 1.0, 2.0],
        trials_per_level: 20,
        ..Default::default()
    };
    let sweep = sweep_acceptance_vs_kl(&cfg)?;
    println!("eta   KL(p||q)   Z        KL after   ratio");
    for r in &sweep.rows {
        println!(
            "{:<5} {:<10.4} {:<8.4} {:<10.4} {:.4}",
            r.eta, r.kl_pq_median, r.acceptance_rate_median, r.kl_reduced_median, r.reduction_ratio_median
        );
    }

    let points = [
        LambdaPoint::TimesMinRatio(1.0),
        LambdaPoint::Value(1.0),
        LambdaPoint::TimesMaxRatio(0.5),
        LambdaPoint::TimesMaxRatio(1.0),
    ];
    let ls = sweep_kl_reduction(&cfg, &points)?;
    println!("\neta   lambda         Z        ratio");
    for (pt, r) in &ls.rows {
        println!("{:<5} {:<14} {:<8.4} {:.4}", r.eta, format!("{pt:?}"), r.acceptance_rate_median, r.reduction_ratio_median);
    }
    Ok(())
}

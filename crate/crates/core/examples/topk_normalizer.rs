//! Top-k estimate of the normalizer against the exact value, and batch
//! calibration of the estimate with an observed acceptance rate.

use obrs_align::categorical::{dirichlet_pair, top_k, SimPairConfig};
use obrs_align::obrs::{acceptance_rate, ObrsParams};
use obrs_align::z_estimator::{calibrate, z_error_report, z_topk_approx};

fn main() -> obrs_align::Result<()> {
    let (p_new, p_inf) = dirichlet_pair(&SimPairConfig {
        vocab_size: 2000,
        dirichlet_alpha: 0.1,
        noise_scale: 0.5,
        seed: 11,
    })?;
    let params = ObrsParams::new(1.0)?;

    println!("k     z_approx   z_exact    fraction");
    for row in z_error_report(&p_new, &p_inf, params, &[1, 5, 10, 20, 40, 2000])? {
        println!("{:<5} {:<10.6} {:<10.6} {:.4}", row.k, row.z_approx, row.z_exact, row.fraction);
    }

    // From stored top-k lists only, as a trainer would see them.
    let est = z_topk_approx(&top_k(&p_inf, 20)?, &top_k(&p_new, 20)?, params);
    let exact = acceptance_rate(&p_new, &p_inf, params)?;
    println!("k = 20 union of {} ids: {:.6} (exact {exact:.6})", est.support.len(), est.z_approx);

    let observed_accepts = (exact * 10_000.0).round() as u64;
    let cal = calibrate(&[est.z_approx], 10_000, observed_accepts)?;
    println!("kappa {:.4}, corrected {:.6}", cal.kappa, cal.corrected(est.z_approx));
    Ok(())
}

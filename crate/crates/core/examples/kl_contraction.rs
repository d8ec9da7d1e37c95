//! KL(p ‖ q̃_λ) along a log-spaced λ grid for a random Dirichlet pair: the
//! curve never rises and reaches zero once λ covers the largest ratio.

use obrs_align::categorical::{dirichlet_pair, SimPairConfig};
use obrs_align::obrs::{kl_curve, ratio_range};

fn main() -> obrs_align::Result<()> {
    let (p, q) = dirichlet_pair(&SimPairConfig {
        vocab_size: 64,
        dirichlet_alpha: 1.0,
        noise_scale: 1.0,
        seed: 3,
    })?;
    let (lo, hi) = ratio_range(&p, &q)?;
    let n = 12;
    let grid: Vec<f64> = (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect();
    println!("ratio range [{lo:.4}, {hi:.4}]");
    println!("lambda      KL          Z           mass_b");
    for pt in kl_curve(&p, &q, &grid)? {
        println!("{:<11.5} {:<11.6} {:<11.6} {:.6}", pt.c, pt.g, pt.z, pt.mass_b);
    }
    Ok(())
}

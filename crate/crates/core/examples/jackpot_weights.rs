//! Masks and jackpot weights for one hand-built token and for a small batch.

use obrs_align::categorical::{top_k, Categorical};
use obrs_align::correction::{batch_weights, jackpot_weight, Calibration, JackpotConfig, TokenRecord};

fn record(token: usize, inf: &Categorical, reference: &Categorical, new: &Categorical, trajectory: u64) -> obrs_align::Result<TokenRecord> {
    Ok(TokenRecord {
        token_id: token,
        logp_inf: inf.log_prob(token),
        logp_ref: reference.log_prob(token),
        logp_new: new.log_prob(token),
        topk_inf: top_k(inf, 3)?,
        topk_new: top_k(new, 3)?,
        advantage: 1.0,
        group_id: 0,
        position: 0,
        trajectory_id: trajectory,
    })
}

fn main() -> obrs_align::Result<()> {
    let inf = Categorical::from_probs(&[0.5, 0.3, 0.2])?;
    let new = Categorical::from_probs(&[0.2, 0.3, 0.5])?;
    let reference = Categorical::from_probs(&[0.25, 0.3, 0.45])?;

    let cfg = JackpotConfig {
        c1: 3.0,
        c2: 3.0,
        calibration: Calibration::Disabled,
        ..Default::default()
    };
    let w = jackpot_weight(&record(0, &inf, &reference, &new, 0)?, &cfg, 0.7, 2.0)?;
    println!("single token: accept {:.3} w_obrs {:.3} rho {:.3}", w.accept_prob, w.w_obrs, w.rho);

    let batch: Vec<TokenRecord> = (0..12)
        .map(|i| record(i % 3, &inf, &reference, &new, i as u64))
        .collect::<obrs_align::Result<_>>()?;
    let out = batch_weights(&batch, &JackpotConfig::default(), 2.0)?;
    println!(
        "batch: alpha_hat {:.3} mean Z_approx {:.3} kappa {:.3}",
        out.calibration.alpha_hat, out.calibration.mean_z_approx, out.calibration.kappa
    );
    for (rec, w) in batch.iter().zip(&out.weights).take(6) {
        println!("token {} mask {} rho {:.4} tis {:.4}", rec.token_id, w.mask, w.rho, w.tis_weight);
    }
    Ok(())
}

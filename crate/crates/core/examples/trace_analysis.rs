//! Writes a synthetic token trace, reads it back and runs the weighting
//! pipeline on it through the column-buffer interface.

use obrs_align::buffers::{batch_tis, batch_weights, OwnedBuffers};
use obrs_align::categorical::{top_k, Categorical};
use obrs_align::correction::{JackpotConfig, TokenRecord};
use obrs_align::trace::{read_trace, write_trace};

fn main() -> obrs_align::Result<()> {
    let inf = Categorical::from_probs(&[0.4, 0.3, 0.2, 0.1])?;
    let new = Categorical::from_probs(&[0.1, 0.2, 0.3, 0.4])?;
    let records: Vec<TokenRecord> = (0..8)
        .map(|i| {
            let token = i % 4;
            Ok(TokenRecord {
                token_id: token,
                logp_inf: inf.log_prob(token),
                logp_ref: inf.log_prob(token),
                logp_new: new.log_prob(token),
                topk_inf: top_k(&inf, 3)?,
                topk_new: top_k(&new, 3)?,
                advantage: if i % 2 == 0 { 1.0 } else { -1.0 },
                group_id: 0,
                position: i as u64 % 4,
                trajectory_id: i as u64 / 4,
            })
        })
        .collect::<obrs_align::Result<_>>()?;

    let mut text = Vec::new();
    write_trace(&mut text, &records)?;
    println!("{}", String::from_utf8_lossy(&text).lines().next().unwrap_or_default());
    let parsed = read_trace(text.as_slice())?;

    let buffers = OwnedBuffers::from_records(&parsed);
    let w = batch_weights(&buffers.view(), &JackpotConfig::default(), 2.0)?;
    let tis = batch_tis(&buffers.view(), 2.0)?;
    println!("kappa {:.4}", w.calibration.kappa);
    for i in 0..parsed.len() {
        println!("token {} mask {} rho {:.4} tis {:.4}", parsed[i].token_id, w.mask[i], w.rho[i], tis[i]);
    }
    Ok(())
}

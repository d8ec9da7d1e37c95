//! Acceptance probabilities, normalizer and post-rejection distribution for a
//! small proposal/target pair, checked against an empirical sampler run.

use obrs_align::categorical::Categorical;
use obrs_align::obrs::{obrs_sample, post_rejection, ObrsParams};

fn main() -> obrs_align::Result<()> {
    let target = Categorical::from_probs(&[0.2, 0.3, 0.5])?;
    let proposal = Categorical::from_probs(&[0.5, 0.3, 0.2])?;
    let params = ObrsParams::new(1.0)?;

    let post = post_rejection(&target, &proposal, params)?;
    println!("accept probs  {:?}", post.accept_probs);
    println!("Z             {:.6}", post.z);
    println!("kept dist     {:?}", post.kept_dist.probs());

    let n = 200_000;
    let draws = obrs_sample(&proposal, &target, params, n, 7)?;
    let mut counts = [0usize; 3];
    for t in draws {
        counts[t] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    println!("empirical     {freq:.4?}");
    Ok(())
}

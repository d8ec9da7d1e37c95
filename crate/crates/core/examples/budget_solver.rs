//! Finds the scaling λ that meets an acceptance budget and compares it with
//! plain bisection.

use obrs_align::categorical::Categorical;
use obrs_align::obrs::{acceptance_rate, solve_lambda_for_budget};
use obrs_align::oracles::bisect_lambda_for_budget;

fn main() -> obrs_align::Result<()> {
    let target = Categorical::from_probs(&[0.2, 0.3, 0.5])?;
    let proposal = Categorical::from_probs(&[0.5, 0.3, 0.2])?;
    println!("budget  lambda        bisection     Z(lambda)");
    for budget in [0.4, 0.5, 0.7, 0.8, 0.95, 1.0] {
        let params = solve_lambda_for_budget(&target, &proposal, budget)?;
        let bisected = bisect_lambda_for_budget(&target, &proposal, budget, 1e-12)?;
        let z = acceptance_rate(&target, &proposal, params)?;
        println!("{budget:<7} {:<13.9} {bisected:<13.9} {z:.9}", params.lambda());
    }
    Ok(())
}

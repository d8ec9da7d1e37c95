//! Trains the toy task with a stale decoupled actor under a few correction
//! schemes and prints reward and actor/policy KL.

use obrs_align::toy::{train, Scheme, TrainConfig};

fn main() -> obrs_align::Result<()> {
    for scheme in [Scheme::OnPolicy, Scheme::OffPolicyStale, Scheme::Tis, Scheme::JackpotFullPlusDistill] {
        let cfg = TrainConfig {
            scheme,
            staleness: 64,
            ..Default::default()
        };
        let run = train(&cfg, 0)?;
        let trace: Vec<String> = run
            .steps
            .iter()
            .step_by(40)
            .map(|s| format!("{:.2}/{:.2}", s.reward_mean, s.kl_actor_policy))
            .collect();
        println!(
            "{:<26} final {:.3} collapsed {:<5} reward/KL {}",
            scheme.name(),
            run.final_reward,
            run.collapsed,
            trace.join(" ")
        );
    }
    Ok(())
}

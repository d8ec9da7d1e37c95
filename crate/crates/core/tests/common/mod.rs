#![allow(dead_code)]

use obrs_align::categorical::{dirichlet_pair, top_k, CdfTable, Categorical, SimPairConfig};
use obrs_align::correction::TokenRecord;
use obrs_align::rng::{derive_seed, KeyedStream};

/// Behaviour, snapshot and latest distributions for one context.
pub struct Context {
    pub p_inf: Categorical,
    pub p_ref: Categorical,
    pub p_new: Categorical,
}

pub fn contexts(n: usize, vocab_size: usize, noise: f64, seed: u64) -> Vec<Context> {
    (0..n)
        .map(|i| {
            let cfg = SimPairConfig {
                vocab_size,
                dirichlet_alpha: 1.0,
                noise_scale: noise,
                seed: derive_seed(seed, 0, i as u64),
            };
            let (p_new, p_inf) = dirichlet_pair(&cfg).unwrap();
            let (_, p_ref) = dirichlet_pair(&SimPairConfig {
                noise_scale: 0.5 * noise,
                ..cfg
            })
            .unwrap();
            Context { p_inf, p_ref, p_new }
        })
        .collect()
}

pub fn record(token: usize, ctx: &Context, k: usize) -> TokenRecord {
    TokenRecord {
        token_id: token,
        logp_inf: ctx.p_inf.log_prob(token),
        logp_ref: ctx.p_ref.log_prob(token),
        logp_new: ctx.p_new.log_prob(token),
        topk_inf: top_k(&ctx.p_inf, k).unwrap(),
        topk_new: top_k(&ctx.p_new, k).unwrap(),
        advantage: 1.0,
        group_id: 0,
        position: 0,
        trajectory_id: 0,
    }
}

/// `n` tokens drawn from `p_inf`, cycling through `ctxs`. Returns the
/// records and the index of each record's context.
pub fn sampled_batch(ctxs: &[Context], n: usize, k: usize, seed: u64) -> (Vec<TokenRecord>, Vec<usize>) {
    let tables: Vec<CdfTable> = ctxs.iter().map(|c| CdfTable::new(&c.p_inf)).collect();
    let stream = KeyedStream::new(seed);
    let mut records = Vec::with_capacity(n);
    let mut owners = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % ctxs.len();
        let token = tables[c].sample(stream.uniform(0, i as u64));
        let mut rec = record(token, &ctxs[c], k);
        rec.advantage = 2.0 * stream.uniform(1, i as u64) - 1.0;
        rec.group_id = (i / 8) as u64;
        rec.trajectory_id = (i / 64) as u64;
        rec.position = (i % 64) as u64;
        records.push(rec);
        owners.push(c);
    }
    (records, owners)
}

/// The 3-token setting with `p_inf = (0.5, 0.3, 0.2)` and
/// `p_new = (0.2, 0.4, 0.4)`, sampled token 0, `p_ref(0) = 0.25`.
pub fn worked_example() -> TokenRecord {
    let p_inf = Categorical::from_probs(&[0.5, 0.3, 0.2]).unwrap();
    let p_new = Categorical::from_probs(&[0.2, 0.4, 0.4]).unwrap();
    let p_ref = Categorical::from_probs(&[0.25, 0.35, 0.4]).unwrap();
    record(0, &Context { p_inf, p_ref, p_new }, 3)
}

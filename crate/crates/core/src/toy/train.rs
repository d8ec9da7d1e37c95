use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use super::model::{ModelKind, TabularModel};
use super::task::ToyTask;
use crate::categorical::{top_k, SparseTopK};
use crate::correction::{
    grpo_advantages, ppo_obrs_loss_with_z, batch_z_approx, tis_weight, weighted_clip_objective,
    JackpotConfig, LossConfig, TargetPolicy, TokenRecord,
};
use crate::error::{Error, Result};
use crate::obrs::{acceptance_rate, ObrsParams};
use crate::rng::{derive_seed, unit_f64, KeyedStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    OnPolicy,
    OffPolicyStale,
    Tis,
    TisAdjusted,
    JackpotMaskOnly,
    JackpotReweightOnly,
    JackpotFull,
    JackpotFullPlusDistill,
}

impl Scheme {
    pub const ALL: [Scheme; 8] = [
        Scheme::OnPolicy,
        Scheme::OffPolicyStale,
        Scheme::Tis,
        Scheme::TisAdjusted,
        Scheme::JackpotMaskOnly,
        Scheme::JackpotReweightOnly,
        Scheme::JackpotFull,
        Scheme::JackpotFullPlusDistill,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::OnPolicy => "on_policy",
            Scheme::OffPolicyStale => "off_policy_stale",
            Scheme::Tis => "tis",
            Scheme::TisAdjusted => "tis_adjusted",
            Scheme::JackpotMaskOnly => "jackpot_mask_only",
            Scheme::JackpotReweightOnly => "jackpot_reweight_only",
            Scheme::JackpotFull => "jackpot_full",
            Scheme::JackpotFullPlusDistill => "jackpot_full_plus_distill",
        }
    }

    fn is_jackpot(&self) -> bool {
        matches!(
            self,
            Scheme::JackpotMaskOnly
                | Scheme::JackpotReweightOnly
                | Scheme::JackpotFull
                | Scheme::JackpotFullPlusDistill
        )
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|sch| sch.name() == s)
            .ok_or_else(|| format!("unknown scheme `{s}`"))
    }
}

/// Where per-token normalizers come from in the Jackpot schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZSource {
    /// Top-k union estimate, calibrated per batch.
    TopK,
    /// Exact `Σ min(p_inf, p_tgt/λ)` over the full vocabulary.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillDirection {
    /// `KL(policy ‖ actor)`.
    Forward,
    /// `KL(actor ‖ policy)`.
    Reverse,
}

/// Best expected reward reached by a 2000-step on-policy run under the
/// default configuration.
pub const ON_POLICY_GOLDEN: f64 = 0.9998;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub task: ToyTask,
    pub steps: usize,
    /// Rollout weights are refreshed from the live actor every `staleness` steps.
    pub staleness: usize,
    pub group_size: usize,
    pub actor_kind: ModelKind,
    /// Copy the policy into the actor at each refresh (bigram actors only).
    pub actor_sync: bool,
    /// Train the actor on its own rollouts with an unweighted clipped objective.
    pub actor_pg: bool,
    pub lr_policy: f64,
    pub lr_actor: f64,
    pub lr_distill: f64,
    pub distill_iters: usize,
    /// Distill into the actor under every Jackpot scheme, not only
    /// `jackpot_full_plus_distill`.
    pub distill_all_jackpot: bool,
    pub distill_direction: DistillDirection,
    pub ppo_epochs: usize,
    pub jackpot: JackpotConfig,
    pub loss: LossConfig,
    pub z_source: ZSource,
    pub collapse_window: usize,
    pub collapse_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::OnPolicy,
            task: ToyTask::default(),
            steps: 200,
            staleness: 1,
            group_size: 8,
            actor_kind: ModelKind::Bigram,
            actor_sync: false,
            actor_pg: true,
            lr_policy: 200.0,
            lr_actor: 200.0,
            lr_distill: 30.0,
            distill_iters: 5,
            distill_all_jackpot: false,
            distill_direction: DistillDirection::Forward,
            ppo_epochs: 1,
            jackpot: JackpotConfig::default(),
            loss: LossConfig::default(),
            z_source: ZSource::TopK,
            collapse_window: 20,
            collapse_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.jackpot.validate()?;
        self.loss.validate()?;
        let check = |name, value: f64, ok: bool, reason| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter { name, value, reason })
            }
        };
        check("staleness", self.staleness as f64, self.staleness >= 1, "must be at least 1")?;
        check("group_size", self.group_size as f64, self.group_size >= 2, "must be at least 2")?;
        check("ppo_epochs", self.ppo_epochs as f64, self.ppo_epochs >= 1, "must be at least 1")?;
        for (name, v) in [
            ("lr_policy", self.lr_policy),
            ("lr_actor", self.lr_actor),
            ("lr_distill", self.lr_distill),
        ] {
            check(name, v, v >= 0.0 && v.is_finite(), "must be non-negative and finite")?;
        }
        check(
            "collapse_fraction",
            self.collapse_fraction,
            (0.0..1.0).contains(&self.collapse_fraction),
            "must lie in [0, 1)",
        )?;
        if self.actor_sync && self.actor_kind != ModelKind::Bigram {
            return Err(Error::InvalidParameter {
                name: "actor_sync",
                value: 1.0,
                reason: "only a bigram actor can copy the policy's weights",
            });
        }
        Ok(())
    }

    fn uses_distill(&self) -> bool {
        self.scheme == Scheme::JackpotFullPlusDistill || (self.distill_all_jackpot && self.scheme.is_jackpot())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub reward_mean: f64,
    pub kl_actor_policy: f64,
    pub acceptance_rate: f64,
    pub grad_norm: f64,
    pub collapsed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub scheme: Scheme,
    pub seed: u64,
    pub steps: Vec<StepMetrics>,
    pub collapsed: bool,
    pub final_reward: f64,
    /// Policy logits after the last step.
    pub policy: TabularModel,
}

/// One sampled sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    pub contexts: Vec<usize>,
    pub tokens: Vec<usize>,
    pub reward: f64,
}

/// `per_prompt` trajectories for every prompt, sampled from `actor`.
pub fn rollout(task: &ToyTask, actor: &TabularModel, per_prompt: usize, seed: u64) -> Vec<Trajectory> {
    let samplers = actor.samplers();
    let mut rng = KeyedStream::new(seed).sequential(0);
    let mut out = Vec::with_capacity(task.n_prompts * per_prompt);
    for i in 0..task.n_prompts {
        let prompt = task.prompt(i);
        for _ in 0..per_prompt {
            let mut context = prompt;
            let mut contexts = Vec::with_capacity(task.horizon);
            let mut tokens = Vec::with_capacity(task.horizon);
            for _ in 0..task.horizon {
                let a = samplers[context].sample(unit_f64(rng.next_u64()));
                contexts.push(context);
                tokens.push(a);
                context = a;
            }
            let reward = task.reward(prompt, &tokens);
            out.push(Trajectory {
                prompt,
                contexts,
                tokens,
                reward,
            });
        }
    }
    out
}

/// Flattened per-token view of a batch for the policy surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBatch {
    pub contexts: Vec<usize>,
    pub tokens: Vec<usize>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
    pub mask: Vec<u8>,
}

/// Weighted clipped objective of `model` on `batch` and its exact gradient
/// with respect to the logit table. Weights and masks are constants.
pub fn policy_surrogate(model: &TabularModel, batch: &PolicyBatch, lcfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let n = batch.contexts.len();
    if batch.tokens.len() != n {
        return Err(Error::LengthMismatch {
            what: "tokens",
            expected: n,
            got: batch.tokens.len(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..model.vocab_size()).map(|c| model.log_probs(c)).collect();
    let current: Vec<f64> = batch
        .contexts
        .iter()
        .zip(&batch.tokens)
        .map(|(&c, &a)| rows[c][a])
        .collect();
    let clip = weighted_clip_objective(
        &current,
        &batch.old_logp,
        &batch.advantages,
        &batch.weights,
        &batch.mask,
        lcfg,
    )?;
    Ok((clip.objective, logp_grad_to_logits(model, &rows, &batch.contexts, &batch.tokens, &clip.grad_logp)))
}

/// Chain rule through log-softmax: `∂ log π(a|c) / ∂ θ[c] = e_a - π(·|c)`.
fn logp_grad_to_logits(
    model: &TabularModel,
    rows: &[Vec<f64>],
    contexts: &[usize],
    tokens: &[usize],
    grad_logp: &[f64],
) -> Vec<f64> {
    let v = model.vocab_size();
    let mut grad = vec![0.0; model.logits().len()];
    for ((&c, &a), &g) in contexts.iter().zip(tokens).zip(grad_logp) {
        if g == 0.0 {
            continue;
        }
        let r = model.row_index(c);
        let row = &mut grad[r * v..(r + 1) * v];
        for (j, lp) in rows[c].iter().enumerate() {
            row[j] -= g * lp.exp();
        }
        row[a] += g;
    }
    grad
}

/// Average distillation loss over `contexts` and its gradient with respect
/// to the actor's logit table.
pub fn distill_objective(
    actor: &TabularModel,
    policy: &TabularModel,
    contexts: &[usize],
    direction: DistillDirection,
) -> Result<(f64, Vec<f64>)> {
    if contexts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let v = actor.vocab_size();
    let mut counts = vec![0usize; v];
    for &c in contexts {
        counts[c] += 1;
    }
    let scale = 1.0 / contexts.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; actor.logits().len()];
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let w = n as f64 * scale;
        let pa = actor.dist(c);
        let pp = policy.dist(c);
        let (l, g) = match direction {
            DistillDirection::Forward => (
                crate::correction::distill_loss(&pp, &pa)?,
                crate::correction::distill_grad_logits(&pp, &pa)?,
            ),
            DistillDirection::Reverse => (
                crate::correction::reverse_kl_loss(&pp, &pa)?,
                crate::correction::reverse_kl_grad_logits(&pp, &pa)?,
            ),
        };
        loss += w * l;
        let r = actor.row_index(c);
        for (dst, gj) in grad[r * v..(r + 1) * v].iter_mut().zip(g) {
            *dst += w * gj;
        }
    }
    Ok((loss, grad))
}

/// One gradient-descent step on the distillation loss. Returns the loss
/// before and after the step.
pub fn distill_step(
    actor: &mut TabularModel,
    policy: &TabularModel,
    contexts: &[usize],
    lr: f64,
    direction: DistillDirection,
) -> Result<(f64, f64)> {
    let (before, grad) = distill_objective(actor, policy, contexts, direction)?;
    actor.apply(&grad, -lr);
    let (after, _) = distill_objective(actor, policy, contexts, direction)?;
    Ok((before, after))
}

/// `KL(actor(·|c) ‖ policy(·|c))` averaged over `contexts`.
pub fn kl_actor_policy(actor: &TabularModel, policy: &TabularModel, contexts: &[usize]) -> Result<f64> {
    let (loss, _) = distill_objective(actor, policy, contexts, DistillDirection::Reverse)?;
    Ok(loss)
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct CollapseTracker {
    peak: f64,
    below: usize,
    window: usize,
    fraction: f64,
    collapsed: bool,
}

impl CollapseTracker {
    fn update(&mut self, reward: f64, finite: bool) -> bool {
        if !finite {
            self.collapsed = true;
            return true;
        }
        self.peak = self.peak.max(reward);
        if reward < self.fraction * self.peak {
            self.below += 1;
        } else {
            self.below = 0;
        }
        if self.below >= self.window {
            self.collapsed = true;
        }
        self.collapsed
    }
}

/// Runs one training run. Deterministic in `(cfg, seed)`.
pub fn train(cfg: &TrainConfig, seed: u64) -> Result<RunMetrics> {
    cfg.validate()?;
    let task = &cfg.task;
    let v = task.vocab_size;
    let mut policy = TabularModel::uniform(ModelKind::Bigram, v);
    let on_policy = cfg.scheme == Scheme::OnPolicy;
    let (actor_kind, actor_sync, staleness) = if on_policy {
        (ModelKind::Bigram, true, 1)
    } else {
        (cfg.actor_kind, cfg.actor_sync, cfg.staleness)
    };
    let mut actor = TabularModel::uniform(actor_kind, v);
    let mut rollout_model = actor.clone();
    let mut tracker = CollapseTracker {
        peak: 0.0,
        below: 0,
        window: cfg.collapse_window,
        fraction: cfg.collapse_fraction,
        collapsed: false,
    };
    let mut steps = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if step % staleness == 0 {
            if actor_sync {
                actor.copy_from(&policy)?;
            }
            rollout_model = actor.clone();
        }
        let trajectories = rollout(task, &rollout_model, cfg.group_size, derive_seed(seed, 0, step as u64));
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let groups: Vec<u64> = trajectories.iter().map(|t| t.prompt as u64).collect();
        let traj_adv = grpo_advantages(&rewards, &groups)?;

        let mut contexts = Vec::new();
        let mut tokens = Vec::new();
        let mut advantages = Vec::new();
        let mut traj_ids = Vec::new();
        let mut positions = Vec::new();
        for (i, t) in trajectories.iter().enumerate() {
            for (pos, (&c, &a)) in t.contexts.iter().zip(&t.tokens).enumerate() {
                contexts.push(c);
                tokens.push(a);
                advantages.push(traj_adv[i]);
                traj_ids.push(i as u64);
                positions.push(pos as u64);
            }
        }

        let inf_rows: Vec<Vec<f64>> = (0..v).map(|c| rollout_model.log_probs(c)).collect();
        let reference = policy.clone();
        let ref_rows: Vec<Vec<f64>> = (0..v).map(|c| reference.log_probs(c)).collect();
        let logp_inf: Vec<f64> = contexts.iter().zip(&tokens).map(|(&c, &a)| inf_rows[c][a]).collect();
        let logp_ref: Vec<f64> = contexts.iter().zip(&tokens).map(|(&c, &a)| ref_rows[c][a]).collect();
        let inf_topk: Vec<SparseTopK> = if cfg.scheme.is_jackpot() {
            (0..v)
                .map(|c| top_k(&rollout_model.dist(c), cfg.jackpot.top_k.min(v)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mask_seed = derive_seed(seed, 1, step as u64);

        let mut grad_norm = 0.0;
        let mut acceptance = 0.0;
        for _ in 0..cfg.ppo_epochs {
            let new_rows: Vec<Vec<f64>> = (0..v).map(|c| policy.log_probs(c)).collect();
            let logp_new: Vec<f64> = contexts.iter().zip(&tokens).map(|(&c, &a)| new_rows[c][a]).collect();
            let n = contexts.len();
            let (old_logp, weights, mask) = match cfg.scheme {
                Scheme::OnPolicy | Scheme::OffPolicyStale => {
                    acceptance = mean_accept(&logp_new, &logp_inf, cfg.jackpot.lambda);
                    (logp_ref.clone(), vec![1.0; n], vec![1u8; n])
                }
                Scheme::Tis => {
                    acceptance = mean_accept(&logp_new, &logp_inf, cfg.jackpot.lambda);
                    let w = logp_ref
                        .iter()
                        .zip(&logp_inf)
                        .map(|(&r, &i)| tis_weight(r, i, cfg.loss.tis_c))
                        .collect::<Result<_>>()?;
                    (logp_ref.clone(), w, vec![1u8; n])
                }
                Scheme::TisAdjusted => {
                    acceptance = mean_accept(&logp_new, &logp_inf, cfg.jackpot.lambda);
                    let w = logp_new
                        .iter()
                        .zip(&logp_inf)
                        .map(|(&r, &i)| tis_weight(r, i, cfg.loss.tis_c))
                        .collect::<Result<_>>()?;
                    (logp_new.clone(), w, vec![1u8; n])
                }
                _ => {
                    let jcfg = JackpotConfig {
                        mask_seed,
                        masking: cfg.scheme != Scheme::JackpotReweightOnly,
                        reweighting: cfg.scheme != Scheme::JackpotMaskOnly,
                        ..cfg.jackpot.clone()
                    };
                    let new_topk: Vec<SparseTopK> = (0..v)
                        .map(|c| top_k(&policy.dist(c), jcfg.top_k.min(v)))
                        .collect::<Result<_>>()?;
                    let records: Vec<TokenRecord> = (0..n)
                        .map(|i| TokenRecord {
                            token_id: tokens[i],
                            logp_inf: logp_inf[i],
                            logp_ref: logp_ref[i],
                            logp_new: logp_new[i],
                            topk_inf: inf_topk[contexts[i]].clone(),
                            topk_new: new_topk[contexts[i]].clone(),
                            advantage: advantages[i],
                            group_id: 0,
                            position: positions[i],
                            trajectory_id: traj_ids[i],
                        })
                        .collect();
                    let z = match cfg.z_source {
                        ZSource::TopK => batch_z_approx(&records, &jcfg)?,
                        ZSource::Exact => {
                            let params = ObrsParams::new(jcfg.lambda)?;
                            let per_context: Vec<f64> = (0..v)
                                .map(|c| {
                                    let target = match jcfg.target_policy {
                                        TargetPolicy::Latest => policy.dist(c),
                                        TargetPolicy::Reference => reference.dist(c),
                                    };
                                    acceptance_rate(&target, &rollout_model.dist(c), params)
                                })
                                .collect::<Result<_>>()?;
                            contexts.iter().map(|&c| per_context[c]).collect()
                        }
                    };
                    let out = match ppo_obrs_loss_with_z(&records, &z, &logp_new, &jcfg, &cfg.loss) {
                        Ok(out) => out,
                        Err(Error::AllMasked) => {
                            // Nothing survived; the step makes no update.
                            acceptance = 0.0;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    acceptance = out.calibration.alpha_hat;
                    let w = out.weights.iter().map(|w| w.rho).collect();
                    let m = out.weights.iter().map(|w| w.mask).collect();
                    (logp_ref.clone(), w, m)
                }
            };
            let batch = PolicyBatch {
                contexts: contexts.clone(),
                tokens: tokens.clone(),
                old_logp,
                advantages: advantages.clone(),
                weights,
                mask,
            };
            let (_, grad) = policy_surrogate(&policy, &batch, &cfg.loss)?;
            grad_norm = l2(&grad);
            policy.apply(&grad, cfg.lr_policy);
        }

        if !on_policy && cfg.actor_pg && !actor_sync {
            let inf_for_actor = logp_inf.clone();
            let batch = PolicyBatch {
                contexts: contexts.clone(),
                tokens: tokens.clone(),
                old_logp: inf_for_actor,
                advantages: advantages.clone(),
                weights: vec![1.0; contexts.len()],
                mask: vec![1u8; contexts.len()],
            };
            let (_, grad) = policy_surrogate(&actor, &batch, &cfg.loss)?;
            actor.apply(&grad, cfg.lr_actor);
        }
        if cfg.uses_distill() {
            for _ in 0..cfg.distill_iters {
                distill_step(&mut actor, &policy, &contexts, cfg.lr_distill, cfg.distill_direction)?;
            }
        }

        let finite = policy.logits().iter().all(|x| x.is_finite()) && actor.logits().iter().all(|x| x.is_finite());
        let reward_mean = if finite { task.expected_reward(&policy) } else { f64::NAN };
        let kl = if finite { kl_actor_policy(&actor, &policy, &contexts)? } else { f64::NAN };
        let collapsed = tracker.update(reward_mean, finite && grad_norm.is_finite());
        steps.push(StepMetrics {
            step,
            reward_mean,
            kl_actor_policy: kl,
            acceptance_rate: acceptance,
            grad_norm,
            collapsed,
        });
        if !finite {
            break;
        }
    }

    let final_reward = steps.last().map_or(0.0, |s| s.reward_mean);
    Ok(RunMetrics {
        scheme: cfg.scheme,
        seed,
        collapsed: tracker.collapsed,
        final_reward,
        steps,
        policy,
    })
}

fn mean_accept(logp_new: &[f64], logp_inf: &[f64], lambda: f64) -> f64 {
    let log_lambda = lambda.ln();
    logp_new
        .iter()
        .zip(logp_inf)
        .map(|(n, i)| (n - i - log_lambda).min(0.0).exp())
        .sum::<f64>()
        / logp_new.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_difference_gradient;
    use crate::rng::KeyedStream;
    use rand::Rng;

    fn random_model(kind: ModelKind, v: usize, rng: &mut impl Rng) -> TabularModel {
        let rows = if kind == ModelKind::Bigram { v } else { 1 };
        let logits = (0..rows * v).map(|_| rng.random_range(-2.0..2.0)).collect();
        TabularModel::from_logits(kind, v, logits).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / l2(b).max(1e-12)
    }

    fn random_batch(model: &TabularModel, old: &TabularModel, rng: &mut impl Rng) -> PolicyBatch {
        let v = model.vocab_size();
        let n = 24;
        let contexts: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
        PolicyBatch {
            old_logp: contexts.iter().zip(&tokens).map(|(&c, &a)| old.log_probs(c)[a]).collect(),
            advantages: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            weights: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
            mask: (0..n).map(|_| u8::from(rng.random_bool(0.8))).collect(),
            contexts,
            tokens,
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut rng = KeyedStream::new(11).sequential(0);
        let lcfg = LossConfig::default();
        let v = 6;
        for point in 0..64 {
            let kind = if point % 2 == 0 { ModelKind::Bigram } else { ModelKind::Unigram };
            let model = random_model(kind, v, &mut rng);
            // Old log-probs close to the current ones keep most ratios inside the clip range.
            let mut old = model.clone();
            let noise: Vec<f64> = (0..old.logits().len()).map(|_| rng.random_range(-0.3..0.3)).collect();
            old.apply(&noise, 1.0);
            let mut batch = random_batch(&model, &old, &mut rng);
            batch.mask[0] = 1;
            let (_, grad) = policy_surrogate(&model, &batch, &lcfg).unwrap();
            let fd = finite_difference_gradient(
                |x| {
                    let m = TabularModel::from_logits(kind, v, x.to_vec()).unwrap();
                    policy_surrogate(&m, &batch, &lcfg).unwrap().0
                },
                model.logits(),
                1e-6,
            )
            .unwrap();
            assert!(rel_err(&grad, &fd) <= 1e-5, "point {point}: {}", rel_err(&grad, &fd));
        }
    }

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let mut rng = KeyedStream::new(3).sequential(0);
        let model = random_model(ModelKind::Bigram, 5, &mut rng);
        let mut batch = random_batch(&model, &model, &mut rng);
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let (obj, grad) = policy_surrogate(&model, &batch, &LossConfig::default()).unwrap();
        assert_eq!(obj, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_token_policy_gradient() {
        let model = TabularModel::from_logits(ModelKind::Unigram, 3, vec![0.5, -0.2, 1.0]).unwrap();
        let lp = model.log_probs(0);
        let batch = PolicyBatch {
            contexts: vec![0],
            tokens: vec![1],
            old_logp: vec![lp[1]],
            advantages: vec![0.7],
            weights: vec![1.0],
            mask: vec![1],
        };
        let (obj, grad) = policy_surrogate(&model, &batch, &LossConfig::default()).unwrap();
        assert!((obj - 0.7).abs() < 1e-12);
        for j in 0..3 {
            let want = 0.7 * (f64::from(u8::from(j == 1)) - lp[j].exp());
            assert!((grad[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn distill_gradients_match_finite_differences() {
        let mut rng = KeyedStream::new(5).sequential(0);
        let v = 5;
        for point in 0..64 {
            let policy = random_model(ModelKind::Bigram, v, &mut rng);
            let kind = if point % 2 == 0 { ModelKind::Bigram } else { ModelKind::Unigram };
            let actor = random_model(kind, v, &mut rng);
            let contexts: Vec<usize> = (0..12).map(|_| rng.random_range(0..v)).collect();
            for direction in [DistillDirection::Forward, DistillDirection::Reverse] {
                let (_, grad) = distill_objective(&actor, &policy, &contexts, direction).unwrap();
                let fd = finite_difference_gradient(
                    |x| {
                        let a = TabularModel::from_logits(kind, v, x.to_vec()).unwrap();
                        distill_objective(&a, &policy, &contexts, direction).unwrap().0
                    },
                    actor.logits(),
                    1e-6,
                )
                .unwrap();
                assert!(rel_err(&grad, &fd) <= 1e-5, "point {point} {direction:?}");
            }
        }
    }

    #[test]
    fn distill_step_decreases_kl() {
        let mut rng = KeyedStream::new(8).sequential(0);
        for _ in 0..20 {
            let policy = random_model(ModelKind::Bigram, 8, &mut rng);
            let mut actor = random_model(ModelKind::Bigram, 8, &mut rng);
            let contexts: Vec<usize> = (0..30).map(|_| rng.random_range(0..8)).collect();
            for _ in 0..10 {
                let (before, after) = distill_step(&mut actor, &policy, &contexts, 1.0, DistillDirection::Forward).unwrap();
                if before > 1e-8 {
                    assert!(after < before);
                }
            }
        }
    }

    #[test]
    fn rollout_is_seeded_and_uses_actor_probabilities() {
        let task = ToyTask::default();
        let uniform = TabularModel::uniform(ModelKind::Unigram, 32);
        let lp = uniform.log_probs(7);
        assert!(lp.iter().all(|&x| (x + 32f64.ln()).abs() < 1e-15));
        assert_eq!(rollout(&task, &uniform, 4, 1), rollout(&task, &uniform, 4, 1));
        assert_ne!(rollout(&task, &uniform, 4, 1), rollout(&task, &uniform, 4, 2));

        let mut rng = KeyedStream::new(2).sequential(0);
        let actor = random_model(ModelKind::Unigram, 32, &mut rng);
        let batch = rollout(&task, &actor, 782, 9);
        let mut counts = [0usize; 32];
        let mut n = 0;
        for t in &batch {
            for &a in &t.tokens {
                counts[a] += 1;
                n += 1;
            }
        }
        assert!(n >= 100_000);
        for (a, p) in actor.dist(0).probs().iter().enumerate() {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[a] as f64 - n as f64 * p).abs() <= 4.0 * sigma);
        }
    }

    #[test]
    fn training_is_deterministic() {
        for scheme in [Scheme::Tis, Scheme::JackpotFullPlusDistill] {
            let cfg = TrainConfig {
                scheme,
                steps: 30,
                staleness: 4,
                ..Default::default()
            };
            assert_eq!(train(&cfg, 3).unwrap(), train(&cfg, 3).unwrap());
        }
    }

    #[test]
    fn matched_jackpot_reproduces_on_policy() {
        let base = TrainConfig {
            steps: 200,
            ..Default::default()
        };
        let on = train(&base, 0).unwrap();
        let jackpot = train(
            &TrainConfig {
                scheme: Scheme::JackpotFull,
                actor_sync: true,
                z_source: ZSource::Exact,
                ..base
            },
            0,
        )
        .unwrap();
        assert_eq!(on.policy.logits(), jackpot.policy.logits());
        for (a, b) in on.steps.iter().zip(&jackpot.steps) {
            assert_eq!(a.reward_mean.to_bits(), b.reward_mean.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("nope".parse::<Scheme>().is_err());
    }
}

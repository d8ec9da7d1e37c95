use super::model::TabularModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardRule {
    /// At least `threshold` target tokens.
    Threshold,
    /// At least `threshold` target tokens, and an even number of them.
    ThresholdEven,
}

/// Sequence task: a prompt token starts the context, the model emits
/// `horizon` tokens, and the reward checks how many of them share the
/// prompt's residue modulo `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub vocab_size: usize,
    pub horizon: usize,
    pub n_prompts: usize,
    pub classes: usize,
    pub threshold: usize,
    pub rule: RewardRule,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            horizon: 16,
            n_prompts: 8,
            classes: 4,
            threshold: 6,
            rule: RewardRule::Threshold,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        let check = |name, value: usize, ok: bool, reason| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    value: value as f64,
                    reason,
                })
            }
        };
        check("vocab_size", self.vocab_size, self.vocab_size >= 2, "must be at least 2")?;
        check("horizon", self.horizon, self.horizon >= 1, "must be at least 1")?;
        check(
            "n_prompts",
            self.n_prompts,
            (1..=self.vocab_size).contains(&self.n_prompts),
            "must lie in 1..=vocab_size",
        )?;
        check(
            "classes",
            self.classes,
            self.classes >= 1 && self.vocab_size.is_multiple_of(self.classes),
            "must divide vocab_size",
        )?;
        check("threshold", self.threshold, self.threshold <= self.horizon, "cannot exceed horizon")?;
        Ok(())
    }

    /// Prompt `i` is token `i`.
    pub fn prompt(&self, i: usize) -> usize {
        i
    }

    pub fn is_target(&self, prompt: usize, token: usize) -> bool {
        token % self.classes == prompt % self.classes
    }

    fn passes(&self, count: usize) -> bool {
        match self.rule {
            RewardRule::Threshold => count >= self.threshold,
            RewardRule::ThresholdEven => count >= self.threshold && count.is_multiple_of(2),
        }
    }

    pub fn reward(&self, prompt: usize, tokens: &[usize]) -> f64 {
        let count = tokens.iter().filter(|&&t| self.is_target(prompt, t)).count();
        if self.passes(count) {
            1.0
        } else {
            0.0
        }
    }

    /// Exact expected reward of `model`, averaged over prompts, by dynamic
    /// programming over (previous token, target count).
    pub fn expected_reward(&self, model: &TabularModel) -> f64 {
        let v = self.vocab_size;
        // Under the plain threshold rule counts past the threshold are merged.
        let cap = match self.rule {
            RewardRule::Threshold => self.threshold,
            RewardRule::ThresholdEven => self.horizon,
        };
        let probs: Vec<Vec<f64>> = (0..v).map(|c| model.dist(c).probs()).collect();
        let mut total = 0.0;
        for i in 0..self.n_prompts {
            let prompt = self.prompt(i);
            let mut state = vec![0.0; v * (cap + 1)];
            let mut next = vec![0.0; v * (cap + 1)];
            state[prompt * (cap + 1)] = 1.0;
            for _ in 0..self.horizon {
                next.iter_mut().for_each(|x| *x = 0.0);
                for c in 0..v {
                    for n in 0..=cap {
                        let m = state[c * (cap + 1) + n];
                        if m == 0.0 {
                            continue;
                        }
                        for (a, &pa) in probs[c].iter().enumerate() {
                            let n2 = if self.is_target(prompt, a) { (n + 1).min(cap) } else { n };
                            next[a * (cap + 1) + n2] += m * pa;
                        }
                    }
                }
                std::mem::swap(&mut state, &mut next);
            }
            total += state
                .chunks(cap + 1)
                .flat_map(|row| row.iter().enumerate())
                .filter(|(n, _)| self.passes(*n))
                .map(|(_, m)| m)
                .sum::<f64>();
        }
        total / self.n_prompts as f64
    }
}

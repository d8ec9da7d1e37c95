//! Flat `key = value` run configuration.
//!
//! Lines are UTF-8; `#` starts a comment; blank lines are ignored. Keys are
//! grouped by a dotted prefix (`jackpot.`, `loss.`, `sim.`, `toy.`) plus the
//! top-level `seed`. Unknown keys and repeated keys are rejected.

use std::path::Path;
use std::str::FromStr;

use crate::correction::{
    default_c2, Calibration, Denominator, JackpotConfig, LossConfig, TargetPolicy, WeightForm,
};
use crate::error::{Error, Result};
use crate::simlab::{LambdaPoint, SweepConfig};
use crate::toy::{DistillDirection, ModelKind, RewardRule, TrainConfig, ZSource};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "OBRS_ALIGN_SEED";

/// Every accepted key with its default, as it would appear in a file.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("jackpot.lambda", "1"),
    ("jackpot.c1", "3"),
    ("jackpot.c2", "1.28"),
    ("jackpot.top_k", "20"),
    ("jackpot.target_policy", "latest"),
    ("jackpot.masking", "true"),
    ("jackpot.reweighting", "true"),
    ("jackpot.weight_form", "separate"),
    ("jackpot.calibration", "batch"),
    ("loss.eps_low", "0.2"),
    ("loss.eps_high", "0.28"),
    ("loss.tis_c", "2"),
    ("loss.lambda_distill", "1"),
    ("loss.denominator", "survivors"),
    ("sim.vocab_size", "10000"),
    ("sim.dirichlet_alpha", "1"),
    ("sim.noise_grid", "0, 0.1, 0.25, 0.5, 1, 1.5, 2, 3"),
    ("sim.lambda", "1"),
    ("sim.trials_per_level", "100"),
    ("sim.lambda_points", ""),
    ("toy.scheme", "on_policy"),
    ("toy.seeds", "5"),
    ("toy.steps", "200"),
    ("toy.staleness", "1"),
    ("toy.group_size", "8"),
    ("toy.vocab_size", "32"),
    ("toy.horizon", "16"),
    ("toy.n_prompts", "8"),
    ("toy.classes", "4"),
    ("toy.threshold", "6"),
    ("toy.rule", "threshold"),
    ("toy.actor_kind", "bigram"),
    ("toy.actor_sync", "false"),
    ("toy.actor_pg", "true"),
    ("toy.lr_policy", "200"),
    ("toy.lr_actor", "200"),
    ("toy.lr_distill", "30"),
    ("toy.distill_iters", "5"),
    ("toy.distill_all_jackpot", "false"),
    ("toy.distill_direction", "forward"),
    ("toy.ppo_epochs", "1"),
    ("toy.z_source", "topk"),
    ("toy.collapse_window", "20"),
    ("toy.collapse_fraction", "0.1"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds the simulation sweep, the mask draws and the first toy run.
    pub seed: u64,
    pub jackpot: JackpotConfig,
    pub loss: LossConfig,
    pub sim: SweepConfig,
    /// When non-empty, `simulate` also runs a λ sweep at these points.
    pub sim_lambda_points: Vec<LambdaPoint>,
    pub toy: TrainConfig,
    pub toy_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jackpot: JackpotConfig::default(),
            loss: LossConfig::default(),
            sim: SweepConfig::default(),
            sim_lambda_points: Vec::new(),
            toy: TrainConfig::default(),
            toy_seeds: 5,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value `{value}` for `{key}`"),
    })
}

fn parse_choice<T: Copy>(key: &str, value: &str, line: usize, choices: &[(&str, T)]) -> Result<T> {
    choices
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::Parse {
            line,
            message: format!(
                "invalid value `{value}` for `{key}`; expected one of {}",
                choices.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        })
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s, line))
        .collect()
}

fn parse_calibration(value: &str, line: usize) -> Result<Calibration> {
    match value {
        "batch" => return Ok(Calibration::Batch),
        "disabled" => return Ok(Calibration::Disabled),
        _ => {}
    }
    let counts = value.strip_prefix("counts:").and_then(|rest| rest.split_once(':'));
    match counts {
        Some((p, a)) => Ok(Calibration::Counts {
            proposed: parse_value("jackpot.calibration", p, line)?,
            accepted: parse_value("jackpot.calibration", a, line)?,
        }),
        None => Err(Error::Parse {
            line,
            message: format!(
                "invalid value `{value}` for `jackpot.calibration`; expected batch, disabled or counts:PROPOSED:ACCEPTED"
            ),
        }),
    }
}

/// `1.5` is an absolute λ; `0.5*max` and `2*min` scale a pair's ratio range.
fn parse_lambda_point(text: &str, line: usize) -> Result<LambdaPoint> {
    let key = "sim.lambda_points";
    let (factor, anchor) = match text.split_once('*') {
        Some((f, a)) => (parse_value(key, f.trim(), line)?, a.trim()),
        None if text == "max" || text == "min" => (1.0, text),
        None => return Ok(LambdaPoint::Value(parse_value(key, text, line)?)),
    };
    match anchor {
        "max" => Ok(LambdaPoint::TimesMaxRatio(factor)),
        "min" => Ok(LambdaPoint::TimesMinRatio(factor)),
        _ => Err(Error::Parse {
            line,
            message: format!("invalid λ point `{text}`; expected a number, F*max or F*min"),
        }),
    }
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    parse_choice(key, value, line, &[("true", true), ("false", false)])
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut c2_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            c2_set |= key == "jackpot.c2";
            cfg.set(key, value, line)?;
        }
        if !c2_set {
            cfg.jackpot.c2 = default_c2(cfg.loss.eps_high);
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(crate::error::file_error(path))?)
    }

    /// Config from an optional file, then `OBRS_ALIGN_SEED` from `env_seed`,
    /// then an explicit seed; later sources win.
    pub fn resolve(path: Option<&Path>, env_seed: Option<&str>, cli_seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(text) = env_seed {
            cfg.seed = text.trim().parse().map_err(|_| Error::InvalidEnv {
                name: SEED_ENV,
                value: text.to_string(),
            })?;
        }
        if let Some(seed) = cli_seed {
            cfg.seed = seed;
        }
        cfg.sync();
        Ok(cfg)
    }

    /// Pushes shared settings into the nested configurations.
    fn sync(&mut self) {
        self.sim.seed = self.seed;
        self.jackpot.mask_seed = self.seed;
        self.toy.jackpot = self.jackpot.clone();
        self.toy.loss = self.loss.clone();
    }

    pub fn validate(&self) -> Result<()> {
        self.jackpot.validate()?;
        self.loss.validate()?;
        self.sim.validate()?;
        self.toy.validate()?;
        if self.toy_seeds == 0 {
            return Err(Error::InvalidParameter {
                name: "toy.seeds",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let j = &mut self.jackpot;
        let l = &mut self.loss;
        let s = &mut self.sim;
        let t = &mut self.toy;
        match key {
            "seed" => self.seed = parse_value(key, value, line)?,
            "jackpot.lambda" => j.lambda = parse_value(key, value, line)?,
            "jackpot.c1" => j.c1 = parse_value(key, value, line)?,
            "jackpot.c2" => j.c2 = parse_value(key, value, line)?,
            "jackpot.top_k" => j.top_k = parse_value(key, value, line)?,
            "jackpot.target_policy" => {
                j.target_policy = parse_choice(
                    key,
                    value,
                    line,
                    &[("latest", TargetPolicy::Latest), ("reference", TargetPolicy::Reference)],
                )?
            }
            "jackpot.masking" => j.masking = parse_bool(key, value, line)?,
            "jackpot.reweighting" => j.reweighting = parse_bool(key, value, line)?,
            "jackpot.weight_form" => {
                j.weight_form = parse_choice(
                    key,
                    value,
                    line,
                    &[("separate", WeightForm::Separate), ("composed", WeightForm::Composed)],
                )?
            }
            "jackpot.calibration" => j.calibration = parse_calibration(value, line)?,
            "loss.eps_low" => l.eps_low = parse_value(key, value, line)?,
            "loss.eps_high" => l.eps_high = parse_value(key, value, line)?,
            "loss.tis_c" => l.tis_c = parse_value(key, value, line)?,
            "loss.lambda_distill" => l.lambda_distill = parse_value(key, value, line)?,
            "loss.denominator" => {
                l.denominator = parse_choice(
                    key,
                    value,
                    line,
                    &[("survivors", Denominator::Survivors), ("all_tokens", Denominator::AllTokens)],
                )?
            }
            "sim.vocab_size" => s.vocab_size = parse_value(key, value, line)?,
            "sim.dirichlet_alpha" => s.dirichlet_alpha = parse_value(key, value, line)?,
            "sim.noise_grid" => s.noise_grid = parse_list(key, value, line)?,
            "sim.lambda" => s.lambda = parse_value(key, value, line)?,
            "sim.trials_per_level" => s.trials_per_level = parse_value(key, value, line)?,
            "sim.lambda_points" => {
                self.sim_lambda_points = value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| parse_lambda_point(p, line))
                    .collect::<Result<_>>()?
            }
            "toy.scheme" => t.scheme = parse_value(key, value, line)?,
            "toy.seeds" => self.toy_seeds = parse_value(key, value, line)?,
            "toy.steps" => t.steps = parse_value(key, value, line)?,
            "toy.staleness" => t.staleness = parse_value(key, value, line)?,
            "toy.group_size" => t.group_size = parse_value(key, value, line)?,
            "toy.vocab_size" => t.task.vocab_size = parse_value(key, value, line)?,
            "toy.horizon" => t.task.horizon = parse_value(key, value, line)?,
            "toy.n_prompts" => t.task.n_prompts = parse_value(key, value, line)?,
            "toy.classes" => t.task.classes = parse_value(key, value, line)?,
            "toy.threshold" => t.task.threshold = parse_value(key, value, line)?,
            "toy.rule" => {
                t.task.rule = parse_choice(
                    key,
                    value,
                    line,
                    &[("threshold", RewardRule::Threshold), ("threshold_even", RewardRule::ThresholdEven)],
                )?
            }
            "toy.actor_kind" => {
                t.actor_kind = parse_choice(
                    key,
                    value,
                    line,
                    &[("bigram", ModelKind::Bigram), ("unigram", ModelKind::Unigram)],
                )?
            }
            "toy.actor_sync" => t.actor_sync = parse_bool(key, value, line)?,
            "toy.actor_pg" => t.actor_pg = parse_bool(key, value, line)?,
            "toy.lr_policy" => t.lr_policy = parse_value(key, value, line)?,
            "toy.lr_actor" => t.lr_actor = parse_value(key, value, line)?,
            "toy.lr_distill" => t.lr_distill = parse_value(key, value, line)?,
            "toy.distill_iters" => t.distill_iters = parse_value(key, value, line)?,
            "toy.distill_all_jackpot" => t.distill_all_jackpot = parse_bool(key, value, line)?,
            "toy.distill_direction" => {
                t.distill_direction = parse_choice(
                    key,
                    value,
                    line,
                    &[("forward", DistillDirection::Forward), ("reverse", DistillDirection::Reverse)],
                )?
            }
            "toy.ppo_epochs" => t.ppo_epochs = parse_value(key, value, line)?,
            "toy.z_source" => {
                t.z_source = parse_choice(key, value, line, &[("topk", ZSource::TopK), ("exact", ZSource::Exact)])?
            }
            "toy.collapse_window" => t.collapse_window = parse_value(key, value, line)?,
            "toy.collapse_fraction" => t.collapse_fraction = parse_value(key, value, line)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }
}

use crate::error::{Error, Result};
use crate::kv::{parse_bool, parse_value};
use crate::sequencing::{OrderKind, SchedulerKind};

use super::optim::{AdamWSettings, LrSchedule};

/// Optimizer, corruption and ordering settings. Defaults follow the CIFAR
/// column of the reference hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub cfg_dropout: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub decay_tail_fraction: f64,
    pub seed: u64,
    /// Number of reveal groups `m` used to build training examples.
    pub steps: usize,
    pub order: OrderKind,
    pub scheduler: SchedulerKind,
    /// Random circular shift of the visit order per example.
    pub roll: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.03,
            warmup_steps: 2500,
            grad_clip_norm: 1.0,
            cfg_dropout: 0.1,
            dropout: 0.1,
            batch_size: 128,
            total_steps: 400_000,
            decay_tail_fraction: 0.10,
            seed: 0,
            steps: 16,
            order: OrderKind::Halton,
            scheduler: SchedulerKind::Arccos,
            roll: true,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 18] = [
        "alpha",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "weight_decay",
        "warmup_steps",
        "grad_clip_norm",
        "cfg_dropout",
        "dropout",
        "batch_size",
        "total_steps",
        "decay_tail_fraction",
        "seed",
        "steps",
        "order",
        "scheduler",
        "roll",
    ];

    /// Sets one field from its text form. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "alpha" => self.alpha = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_value(key, value)?,
            "cfg_dropout" => self.cfg_dropout = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "total_steps" => self.total_steps = parse_value(key, value)?,
            "decay_tail_fraction" => self.decay_tail_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "order" => self.order = value.parse()?,
            "scheduler" => self.scheduler = value.parse()?,
            "roll" => self.roll = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines that reproduce this config.
    pub fn to_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.alpha.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("cfg_dropout", self.cfg_dropout.to_string()),
            ("dropout", self.dropout.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("decay_tail_fraction", self.decay_tail_fraction.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("order", self.order.to_string()),
            ("scheduler", self.scheduler.to_string()),
            ("roll", self.roll.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("cfg_dropout", self.cfg_dropout)?;
        unit("decay_tail_fraction", self.decay_tail_fraction)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("learning_rate, weight_decay must be >= 0 and adam_eps > 0"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::invalid("grad_clip_norm must be positive"));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.steps == 0 {
            return Err(Error::invalid("batch_size, total_steps and steps must be positive"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.learning_rate,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            decay_tail_fraction: self.decay_tail_fraction,
        }
    }

    pub fn adamw(&self) -> AdamWSettings {
        AdamWSettings {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.schedule().lr_at(step)
    }
}

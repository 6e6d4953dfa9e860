//! Group-by-group generation with classifier-free guidance and sampling-time
//! self-correction of already revealed tokens.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::predictor::{softmax, Predictor, PredictorOutput};
use crate::sequencing::{build_order, group_sizes, partition, roll, GroupPartition, OrderKind, SchedulerKind};
use crate::token::{Token, TokenGrid, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RollPolicy {
    Off,
    Fixed(usize),
    /// Offset drawn from the sample's RNG.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionRule {
    pub enabled: bool,
    /// First step (0-based) after which corrections run.
    pub start_step: usize,
    /// Minimum `p_max - p_current` for a position to be a candidate.
    pub margin: f64,
    /// Maximum resampled positions per pass.
    pub budget: usize,
    /// Refinement passes per step, each on a fresh forward.
    pub passes: usize,
}

impl Default for CorrectionRule {
    fn default() -> Self {
        Self {
            enabled: true,
            start_step: 6,
            margin: 0.0,
            budget: 1,
            passes: 1,
        }
    }
}

impl CorrectionRule {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub order: OrderKind,
    pub roll: RollPolicy,
    pub scheduler: SchedulerKind,
    pub temperature: f64,
    /// Per-step temperatures; when non-empty it must have `steps` entries and
    /// overrides `temperature`.
    pub temperature_schedule: Vec<f64>,
    pub cfg_weight: f64,
    pub correction: CorrectionRule,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            order: OrderKind::Halton,
            roll: RollPolicy::Off,
            scheduler: SchedulerKind::Arccos,
            temperature: 1.0,
            temperature_schedule: Vec::new(),
            cfg_weight: 0.0,
            correction: CorrectionRule::default(),
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.steps == 0 || self.steps > n {
            return Err(Error::invalid(format!(
                "steps = {} must lie in [1, {n}]",
                self.steps
            )));
        }
        let bad_temp = |t: f64| !(t > 0.0 && t.is_finite());
        if bad_temp(self.temperature) {
            return Err(Error::invalid(format!("temperature {} must be > 0", self.temperature)));
        }
        if !self.temperature_schedule.is_empty() {
            if self.temperature_schedule.len() != self.steps {
                return Err(Error::invalid(format!(
                    "temperature schedule has {} entries for {} steps",
                    self.temperature_schedule.len(),
                    self.steps
                )));
            }
            if let Some(&t) = self.temperature_schedule.iter().find(|&&t| bad_temp(t)) {
                return Err(Error::invalid(format!("temperature {t} must be > 0")));
            }
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(Error::invalid(format!("cfg weight {} must be >= 0", self.cfg_weight)));
        }
        let c = &self.correction;
        if c.enabled {
            if c.start_step >= self.steps {
                return Err(Error::invalid(format!(
                    "correction start step {} must be below steps {}",
                    c.start_step, self.steps
                )));
            }
            if c.budget > n {
                return Err(Error::invalid(format!("correction budget {} exceeds {n} cells", c.budget)));
            }
            if !(c.margin >= 0.0) {
                return Err(Error::invalid("correction margin must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn temperature_at(&self, step: usize) -> f64 {
        self.temperature_schedule
            .get(step)
            .copied()
            .unwrap_or(self.temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correction {
    pub position: usize,
    pub old: Token,
    pub new: Token,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepTrace {
    pub step: usize,
    /// `(position, token)` written this step.
    pub revealed: Vec<(usize, Token)>,
    /// Resampled positions whose value changed.
    pub corrected: Vec<Correction>,
    /// Mean of the top softmax probability over the revealed positions.
    pub mean_max_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub steps: Vec<StepTrace>,
    pub mask_id: Token,
}

impl SampleTrace {
    pub const CSV_HEADER: &'static str = "step,position,old,new";

    pub fn corrected_count(&self) -> usize {
        self.steps.iter().map(|s| s.corrected.len()).sum()
    }

    /// Reveals (with `old` equal to the mask id) followed by corrections, per
    /// step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            for &(p, t) in &s.revealed {
                let _ = writeln!(out, "{},{},{},{}", s.step, p, self.mask_id, t);
            }
            for c in &s.corrected {
                let _ = writeln!(out, "{},{},{},{}", s.step, c.position, c.old, c.new);
            }
        }
        out
    }
}

/// `(1 + w) cond - w uncond`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::invalid(format!(
            "cfg shapes differ: {} vs {}",
            cond.len(),
            uncond.len()
        )));
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| (1.0 + w) * c - w * u)
        .collect())
}

/// Guided logits: one forward when `w = 0`, otherwise class and null passes.
pub fn guided_logits<P: Predictor + ?Sized>(
    predictor: &P,
    grid: &TokenGrid,
    class_label: usize,
    w: f64,
) -> Result<PredictorOutput> {
    let cond = predictor.predict(grid, class_label)?;
    if w == 0.0 {
        return Ok(cond);
    }
    let uncond = predictor.predict(grid, predictor.null_class())?;
    let mixed = cfg_combine(cond.logits(), uncond.logits(), w)?;
    PredictorOutput::new(cond.positions(), cond.vocab(), mixed)
}

/// Draws from `softmax(row / temperature)`.
pub fn sample_categorical<R: Rng + ?Sized>(row: &[f64], temperature: f64, rng: &mut R) -> Token {
    let scaled: Vec<f64> = row.iter().map(|&l| l / temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as Token;
        }
    }
    // Rounding left `acc` just below 1: take the last token with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as Token
}

fn check_logits(logits: &PredictorOutput, grid: &TokenGrid) -> Result<()> {
    if logits.positions() != grid.len() || logits.vocab() != grid.vocab().size() as usize {
        return Err(Error::invalid(format!(
            "predictor returned {}x{} logits for a grid of {} cells with V = {}",
            logits.positions(),
            logits.vocab(),
            grid.len(),
            grid.vocab().size()
        )));
    }
    Ok(())
}

/// Resamples up to `budget` revealed cells whose current token trails the
/// most likely one by more than `margin`. Candidates are ranked by that gap,
/// ties to the lower position. Masked cells are never touched.
pub fn correct_context<R: Rng + ?Sized>(
    logits: &PredictorOutput,
    grid: &mut TokenGrid,
    margin: f64,
    budget: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Correction>> {
    check_logits(logits, grid)?;
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for p in 0..grid.len() {
        if grid.is_masked(p) {
            continue;
        }
        let probs = logits.probs(p);
        let p_max = probs.iter().copied().fold(0.0, f64::max);
        let gap = p_max - probs[grid.get(p) as usize];
        if gap > margin {
            candidates.push((gap, p));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::new();
    for &(_, p) in candidates.iter().take(budget) {
        let old = grid.get(p);
        let new = sample_categorical(logits.row(p), temperature, rng);
        if new != old {
            grid.set_unchecked(p, new);
            out.push(Correction { position: p, old, new });
        }
    }
    Ok(out)
}

/// Reveals group `step` and, when the rule allows it, runs correction passes.
pub fn sample_step<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    grid: &mut TokenGrid,
    groups: &GroupPartition,
    step: usize,
    class_label: usize,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<StepTrace> {
    let group = groups
        .groups
        .get(step)
        .ok_or_else(|| Error::invalid(format!("step {step} outside partition")))?;
    if let Some(&p) = group.iter().find(|&&p| !grid.is_masked(p)) {
        return Err(Error::invalid(format!("position {p} of step {step} is already revealed")));
    }
    if let Some(&p) = groups.prefix(step).iter().find(|&&p| grid.is_masked(p)) {
        return Err(Error::invalid(format!("earlier position {p} is still masked at step {step}")));
    }
    let tau = config.temperature_at(step);
    let logits = guided_logits(predictor, grid, class_label, config.cfg_weight)?;
    check_logits(&logits, grid)?;

    let mut trace = StepTrace {
        step,
        ..StepTrace::default()
    };
    let mut max_prob = 0.0;
    for &p in group {
        let t = sample_categorical(logits.row(p), tau, rng);
        max_prob += logits.probs(p).iter().copied().fold(0.0, f64::max);
        trace.revealed.push((p, t));
    }
    trace.mean_max_prob = max_prob / group.len().max(1) as f64;
    for &(p, t) in &trace.revealed {
        grid.set_unchecked(p, t);
    }

    let rule = &config.correction;
    if rule.enabled && step >= rule.start_step {
        for _ in 0..rule.passes {
            let fresh = guided_logits(predictor, grid, class_label, config.cfg_weight)?;
            let fixed = correct_context(&fresh, grid, rule.margin, rule.budget, tau, rng)?;
            trace.corrected.extend(fixed);
        }
    }
    Ok(trace)
}

/// The visit groups a sampler with `config` uses on an `h x w` grid.
pub fn sampling_groups<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<GroupPartition> {
    let n = h * w;
    let order_seed: u64 = if config.order == OrderKind::Random { rng.gen() } else { 0 };
    let mut plan = build_order(config.order, h, w, order_seed);
    plan = match config.roll {
        RollPolicy::Off => plan,
        RollPolicy::Fixed(k) => roll(&plan, k),
        RollPolicy::Random => roll(&plan, rng.gen_range(0..n)),
    };
    partition(&plan, &group_sizes(n, config.steps, config.scheduler)?)
}

/// Generates one grid using an explicit RNG.
pub fn sample_with_rng<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    h: usize,
    w: usize,
    vocab: Vocabulary,
    class_label: usize,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<(TokenGrid, SampleTrace)> {
    config.validate(h * w)?;
    let groups = sampling_groups(h, w, config, rng)?;
    let mut grid = TokenGrid::new_fully_masked(h, w, vocab)?;
    let mut trace = SampleTrace {
        steps: Vec::with_capacity(config.steps),
        mask_id: vocab.mask_id(),
    };
    for s in 0..config.steps {
        let st = sample_step(predictor, &mut grid, &groups, s, class_label, config, rng)?;
        trace.steps.push(st);
    }
    debug_assert!(grid.is_complete());
    Ok((grid, trace))
}

/// Generates one grid from `config.seed`.
pub fn sample<P: Predictor + ?Sized>(
    predictor: &P,
    h: usize,
    w: usize,
    vocab: Vocabulary,
    class_label: usize,
    config: &SampleConfig,
) -> Result<(TokenGrid, SampleTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_with_rng(predictor, h, w, vocab, class_label, config, &mut rng)
}

//! Evaluation: top-k reconstruction accuracy, exact distribution distances
//! against enumerable oracles, and constraint violation rates.

use std::fmt::Write as _;

use rand::Rng;

use crate::corruption::inject_random_tokens;
use crate::error::{Error, Result};
use crate::predictor::{MicroDistribution, Predictor};
use crate::sampling::{sample_with_rng, SampleConfig};
use crate::sequencing::halton_order;
use crate::token::{Token, TokenGrid};

pub const CSV_HEADER: &str = "metric,category,value,count,draws,seed";

/// True iff `true_token` is among the `ceil(fraction * V)` highest logits,
/// ties ranked by lower token id first.
pub fn top_k_hit(row: &[f64], true_token: Token, fraction: f64) -> bool {
    let k = (fraction * row.len() as f64).ceil() as usize;
    let t = true_token as usize;
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > row[t] || (l == row[t] && j < t))
        .count();
    ahead < k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub hits: usize,
    pub total: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.hits += hit as usize;
        self.total += 1;
    }

    /// `None` for an empty category.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccuracyReport {
    /// Masked positions.
    pub next: Tally,
    /// All revealed positions, corrupted or not.
    pub context: Tally,
    /// Revealed positions whose value differs from the clean token.
    pub corrupted: Tally,
    /// Grids scored.
    pub grids: usize,
}

impl AccuracyReport {
    pub fn acc_next(&self) -> Option<f64> {
        self.next.accuracy()
    }

    pub fn acc_full_context(&self) -> Option<f64> {
        self.context.accuracy()
    }

    pub fn acc_corrupted_tokens(&self) -> Option<f64> {
        self.corrupted.accuracy()
    }

    pub fn merge(&mut self, other: &AccuracyReport) {
        for (a, b) in [
            (&mut self.next, other.next),
            (&mut self.context, other.context),
            (&mut self.corrupted, other.corrupted),
        ] {
            a.hits += b.hits;
            a.total += b.total;
        }
        self.grids += other.grids;
    }

    /// Report rows; empty categories are written with an empty value.
    pub fn csv_rows(&self, seed: u64) -> String {
        let mut out = String::new();
        for (name, t) in [
            ("next", self.next),
            ("full_context", self.context),
            ("corrupted_tokens", self.corrupted),
        ] {
            let value = t.accuracy().map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "top_k_accuracy,{name},{value},{},{},{seed}", t.total, self.grids);
        }
        out
    }
}

/// Keeps the first `ceil(context_fraction * n)` Halton positions as context,
/// corrupts them at `alpha`, runs one forward and scores every position
/// against the clean grid.
pub fn one_step_reconstruction<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    clean: &TokenGrid,
    class_label: usize,
    context_fraction: f64,
    alpha: f64,
    top_fraction: f64,
    rng: &mut R,
) -> Result<AccuracyReport> {
    if !(context_fraction > 0.0 && context_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "context fraction {context_fraction} outside (0, 1]"
        )));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::invalid(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    if !clean.is_complete() {
        return Err(Error::invalid("reference grid must be fully observed"));
    }
    let n = clean.len();
    let keep = ((context_fraction * n as f64).ceil() as usize).min(n);
    let order = halton_order(clean.height(), clean.width()).order;
    let (context, hidden) = order.split_at(keep);
    let (mut input, _) = inject_random_tokens(clean, context, alpha, rng)?;
    input.mask_positions(hidden)?;

    let out = predictor.predict(&input, class_label)?;
    let mut report = AccuracyReport {
        grids: 1,
        ..AccuracyReport::default()
    };
    for p in 0..n {
        let hit = top_k_hit(out.row(p), clean.get(p), top_fraction);
        if input.is_masked(p) {
            report.next.add(hit);
        } else {
            report.context.add(hit);
            if input.get(p) != clean.get(p) {
                report.corrupted.add(hit);
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub tv: f64,
    pub empirical: Vec<f64>,
    pub exact: Vec<f64>,
    pub draws: usize,
}

impl DistributionReport {
    pub fn csv_rows(&self, category: &str, seed: u64) -> String {
        format!(
            "total_variation,{category},{},{},{},{seed}\n",
            self.tv,
            self.exact.len(),
            self.draws
        )
    }
}

/// `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Runs the sampler `draws` times (class 0) and compares the histogram of
/// outcomes with the oracle's table.
pub fn empirical_vs_exact<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    micro: &MicroDistribution,
    config: &SampleConfig,
    draws: usize,
    rng: &mut R,
) -> Result<DistributionReport> {
    if draws == 0 {
        return Err(Error::invalid("draws must be >= 1"));
    }
    let mut counts = vec![0usize; micro.outcomes()];
    for _ in 0..draws {
        let (g, _) = sample_with_rng(predictor, micro.height(), micro.width(), micro.vocab(), 0, config, rng)?;
        counts[micro.index_of(g.cells())] += 1;
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    Ok(DistributionReport {
        tv: total_variation(&empirical, micro.table()),
        exact: micro.table().to_vec(),
        empirical,
        draws,
    })
}

/// Fraction of `samples` for which `holds` is false.
pub fn violation_rate<F: Fn(&TokenGrid) -> bool>(samples: &[TokenGrid], holds: F) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|g| !holds(g)).count() as f64 / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationArm {
    pub rate: f64,
    pub draws: usize,
}

impl ViolationArm {
    /// Binomial standard error of the rate.
    pub fn std_error(&self) -> f64 {
        (self.rate * (1.0 - self.rate) / self.draws as f64).sqrt()
    }
}

/// Samples the two-cell XOR pair (cells must be equal) `draws` times in one
/// parallel step and reports the fraction of unequal pairs.
pub fn xor_violation<R: Rng + ?Sized>(config: &SampleConfig, draws: usize, rng: &mut R) -> Result<ViolationArm> {
    let micro = MicroDistribution::xor_pair();
    let samples = (0..draws)
        .map(|_| sample_with_rng(&micro, 1, 2, micro.vocab(), 0, config, rng).map(|(g, _)| g))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViolationArm {
        rate: violation_rate(&samples, |g| g.get(0) == g.get(1)),
        draws,
    })
}

//! Predictors map a (possibly corrupted, partially masked) grid plus a class
//! label to per-position logits over the codebook. Every position gets a row,
//! masked or not: the context loss and sampling-time correction both score
//! cells that are already revealed.

mod oracle;

pub use oracle::{MicroDistribution, LOG_ZERO, MAX_MICRO_OUTCOMES};

use crate::error::{Error, Result};
use crate::token::TokenGrid;

/// Row-major `positions x vocab` logits in the natural-log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    positions: usize,
    vocab: usize,
    logits: Vec<f64>,
}

impl PredictorOutput {
    pub fn new(positions: usize, vocab: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != positions * vocab {
            return Err(Error::invalid(format!(
                "expected {positions}x{vocab} logits, got {}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite logit at row {}, column {}",
                i / vocab,
                i % vocab
            )));
        }
        Ok(Self {
            positions,
            vocab,
            logits,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, position: usize) -> &[f64] {
        &self.logits[position * self.vocab..(position + 1) * self.vocab]
    }

    pub fn probs(&self, position: usize) -> Vec<f64> {
        softmax(self.row(position))
    }
}

pub trait Predictor: Sync {
    fn predict(&self, grid: &TokenGrid, class_label: usize) -> Result<PredictorOutput>;

    /// Label of the unconditional branch used by classifier-free guidance.
    fn null_class(&self) -> usize;
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let l = log_softmax(&[0.0, 0.0, 0.0, 0.0]);
        assert!((l[2] + 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn output_rejects_non_finite() {
        assert!(PredictorOutput::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(PredictorOutput::new(1, 2, vec![0.0]).is_err());
    }
}

//! Cross-entropy terms of the objective `L = L_next + L_context`.
//!
//! Both terms are means over their tagged positions and score the CLEAN token,
//! never the corrupted input value.

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::predictor::log_softmax;
use crate::token::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRole {
    /// In the group being predicted this step.
    Next,
    /// Already revealed (possibly corrupted) context.
    Context,
    /// Later groups: masked in the input and not scored.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub clean: Vec<Token>,
    pub roles: Vec<TargetRole>,
}

impl Targets {
    pub fn positions(&self, role: TargetRole) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| (r == role).then_some(i))
            .collect()
    }
}

fn mean_nll(logits: &[f64], vocab: usize, targets: &Targets, role: TargetRole) -> Option<f64> {
    let positions = targets.positions(role);
    if positions.is_empty() {
        return None;
    }
    let total: f64 = positions
        .iter()
        .map(|&i| -log_softmax(&logits[i * vocab..(i + 1) * vocab])[targets.clean[i] as usize])
        .sum();
    Some(total / positions.len() as f64)
}

pub fn loss_next(logits: &[f64], vocab: usize, targets: &Targets) -> Result<f64> {
    mean_nll(logits, vocab, targets, TargetRole::Next)
        .ok_or_else(|| Error::invalid("no positions tagged as next"))
}

/// Zero when there is no context (first step).
pub fn loss_context(logits: &[f64], vocab: usize, targets: &Targets) -> f64 {
    mean_nll(logits, vocab, targets, TargetRole::Context).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub next: f64,
    pub context: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.next + self.context
    }
}

/// Both loss terms plus `weight * dL/dlogits`, computed in the model's
/// precision.
pub fn objective<T: Real>(
    logits: &[T],
    vocab: usize,
    targets: &Targets,
    weight: f64,
) -> Result<(LossParts, Vec<T>)> {
    let next_count = targets.roles.iter().filter(|&&r| r == TargetRole::Next).count();
    let ctx_count = targets.roles.iter().filter(|&&r| r == TargetRole::Context).count();
    if next_count == 0 {
        return Err(Error::invalid("no positions tagged as next"));
    }
    let mut parts = LossParts::default();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, &role) in targets.roles.iter().enumerate() {
        let count = match role {
            TargetRole::Next => next_count,
            TargetRole::Context => ctx_count,
            TargetRole::Ignored => continue,
        };
        let row = &logits[i * vocab..(i + 1) * vocab];
        let g = &mut grad[i * vocab..(i + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gi, &l) in g.iter_mut().zip(row) {
            *gi = (l - max).exp();
            sum = sum + *gi;
        }
        let label = targets.clean[i] as usize;
        let nll = (sum.ln() + max - row[label]).to_f64().unwrap_or(f64::NAN);
        let scale = T::lit(weight / count as f64);
        for gi in g.iter_mut() {
            *gi = *gi / sum * scale;
        }
        g[label] = g[label] - scale;
        match role {
            TargetRole::Next => parts.next += nll / count as f64,
            TargetRole::Context => parts.context += nll / count as f64,
            TargetRole::Ignored => unreachable!(),
        }
    }
    if !parts.next.is_finite() || !parts.context.is_finite() {
        return Err(Error::NumericFailure("non-finite loss".into()));
    }
    Ok((parts, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets(clean: Vec<Token>, roles: Vec<TargetRole>) -> Targets {
        Targets { clean, roles }
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let t = targets(vec![1, 3], vec![TargetRole::Next, TargetRole::Ignored]);
        let l = loss_next(&[0.0; 8], 4, &t).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let t = targets(vec![2], vec![TargetRole::Next]);
        let l = loss_next(&[0.0, 0.0, 60.0], 3, &t).unwrap();
        assert!(l < 1e-20);
        let c = targets(vec![0], vec![TargetRole::Context]);
        assert!(loss_context(&[60.0, 0.0, 0.0], 3, &c) < 1e-20);
    }

    #[test]
    fn shift_invariance() {
        let t = targets(vec![1], vec![TargetRole::Next]);
        let a = loss_next(&[0.3, -1.0, 2.0], 3, &t).unwrap();
        let b = loss_next(&[10.3, 9.0, 12.0], 3, &t).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empty_sets() {
        let t = targets(vec![1], vec![TargetRole::Context]);
        assert!(loss_next(&[0.0, 0.0], 2, &t).is_err());
        let t = targets(vec![1], vec![TargetRole::Next]);
        assert_eq!(loss_context(&[0.0, 0.0], 2, &t), 0.0);
    }

    #[test]
    fn context_label_is_the_clean_token() {
        // the input held a corrupted 2 at this cell; scoring must use the clean 0
        let t = targets(vec![0], vec![TargetRole::Context]);
        let logits = [3.0, 0.0, 1.0];
        let expected = -log_softmax(&logits)[0];
        assert!((loss_context(&logits, 3, &t) - expected).abs() < 1e-15);
        assert!((loss_context(&logits, 3, &t) + log_softmax(&logits)[2]).abs() > 1.0);
    }

    #[test]
    fn objective_agrees_with_reference_losses() {
        let logits: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.4).collect();
        let t = targets(
            vec![0, 2, 1, 1],
            vec![TargetRole::Next, TargetRole::Context, TargetRole::Ignored, TargetRole::Context],
        );
        let (parts, grad) = objective(&logits, 3, &t, 1.0).unwrap();
        assert!((parts.next - loss_next(&logits, 3, &t).unwrap()).abs() < 1e-12);
        assert!((parts.context - loss_context(&logits, 3, &t)).abs() < 1e-12);
        // finite differences of the reference losses
        for k in 0..12 {
            let h = 1e-6;
            let mut up = logits.clone();
            up[k] += h;
            let mut dn = logits.clone();
            dn[k] -= h;
            let f = |l: &[f64]| loss_next(l, 3, &t).unwrap() + loss_context(l, 3, &t);
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-8, "{k}: {fd} vs {}", grad[k]);
        }
        assert!(grad[6..9].iter().all(|&g| g == 0.0));
    }
}

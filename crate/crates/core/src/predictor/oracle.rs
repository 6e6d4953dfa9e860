use rand::Rng;

use super::{Predictor, PredictorOutput};
use crate::error::{Error, Result};
use crate::token::{Token, TokenGrid, Vocabulary};

/// Upper bound on `V^n` for an enumerable distribution.
pub const MAX_MICRO_OUTCOMES: usize = 1 << 20;

/// Log-probability used for impossible outcomes so logits stay finite.
/// `exp(LOG_ZERO)` underflows to exactly zero.
pub const LOG_ZERO: f64 = -1.0e4;

/// An explicit joint distribution over every complete grid of a tiny size.
///
/// Grid `g` is stored at index `sum_i g[i] * V^i` (position 0 is the least
/// significant digit).
#[derive(Debug, Clone, PartialEq)]
pub struct MicroDistribution {
    height: usize,
    width: usize,
    vocab: Vocabulary,
    table: Vec<f64>,
}

fn outcome_count(n: usize, v: u32) -> Result<usize> {
    let mut count = 1usize;
    for _ in 0..n {
        count = count
            .checked_mul(v as usize)
            .filter(|&c| c <= MAX_MICRO_OUTCOMES)
            .ok_or_else(|| {
                Error::invalid(format!("{v}^{n} outcomes exceeds the enumeration limit"))
            })?;
    }
    Ok(count)
}

impl MicroDistribution {
    pub fn from_table(height: usize, width: usize, vocab: Vocabulary, table: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("micro grid dimensions must be positive"));
        }
        let count = outcome_count(height * width, vocab.size())?;
        if table.len() != count {
            return Err(Error::invalid(format!(
                "table has {} entries, expected {count}",
                table.len()
            )));
        }
        if table.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let sum: f64 = table.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self {
            height,
            width,
            vocab,
            table,
        })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(height: usize, width: usize, vocab: Vocabulary, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::invalid("weights must have a positive finite sum"));
        }
        let table = weights.into_iter().map(|w| w / sum).collect();
        Self::from_table(height, width, vocab, table)
    }

    pub fn uniform(height: usize, width: usize, vocab: Vocabulary) -> Result<Self> {
        let count = outcome_count(height * width, vocab.size())?;
        Self::from_weights(height, width, vocab, vec![1.0; count])
    }

    /// Two binary cells that are always equal: half the mass on `(0, 0)`,
    /// half on `(1, 1)`.
    pub fn xor_pair() -> Self {
        let vocab = Vocabulary::new(2).expect("binary vocabulary");
        Self::from_table(1, 2, vocab, vec![0.5, 0.0, 0.0, 0.5]).expect("valid table")
    }

    pub fn point_mass(grid: &TokenGrid) -> Result<Self> {
        if !grid.is_complete() {
            return Err(Error::invalid("point mass needs a complete grid"));
        }
        let count = outcome_count(grid.len(), grid.vocab().size())?;
        let mut table = vec![0.0; count];
        let vocab = grid.vocab();
        let mut dist = Self {
            height: grid.height(),
            width: grid.width(),
            vocab,
            table: Vec::new(),
        };
        table[dist.index_of(grid.cells())] = 1.0;
        dist.table = table;
        Ok(dist)
    }

    /// Dirichlet(1, .., 1) draw: every complete grid gets positive mass.
    pub fn random<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        vocab: Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        let count = outcome_count(height * width, vocab.size())?;
        let weights = (0..count)
            .map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-12)
            .collect();
        Self::from_weights(height, width, vocab, weights)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn outcomes(&self) -> usize {
        self.table.len()
    }

    pub fn index_of(&self, cells: &[Token]) -> usize {
        let v = self.vocab.size() as usize;
        cells.iter().rev().fold(0, |acc, &c| acc * v + c as usize)
    }

    pub fn cells_at(&self, mut index: usize) -> Vec<Token> {
        let v = self.vocab.size() as usize;
        (0..self.positions())
            .map(|_| {
                let c = index % v;
                index /= v;
                c as Token
            })
            .collect()
    }

    pub fn grid_at(&self, index: usize) -> TokenGrid {
        TokenGrid::from_cells(self.height, self.width, self.vocab, self.cells_at(index))
            .expect("enumerated cells are valid")
    }

    pub fn prob(&self, grid: &TokenGrid) -> f64 {
        self.table[self.index_of(grid.cells())]
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.height() != self.height || grid.width() != self.width || grid.vocab() != self.vocab {
            return Err(Error::invalid(format!(
                "grid {}x{} (V={}) does not match micro distribution {}x{} (V={})",
                grid.height(),
                grid.width(),
                grid.vocab().size(),
                self.height,
                self.width,
                self.vocab.size()
            )));
        }
        Ok(())
    }

    /// Exact per-position conditionals by marginalizing the table.
    ///
    /// A masked cell conditions on every unmasked cell. An unmasked cell
    /// conditions on every *other* unmasked cell (leave-one-out), which is what
    /// the correction rule consults.
    pub fn conditionals(&self, grid: &TokenGrid) -> Result<PredictorOutput> {
        self.check_grid(grid)?;
        let n = self.positions();
        let v = self.vocab.size() as usize;
        let observed = grid.context_positions();
        let mut mass = vec![0.0f64; n * v];
        let mut cells = vec![0 as Token; n];

        for (index, &p) in self.table.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut rest = index;
            for c in cells.iter_mut() {
                *c = (rest % v) as Token;
                rest /= v;
            }
            let mut mismatch = None;
            let mut mismatches = 0;
            for &j in &observed {
                if cells[j] != grid.get(j) {
                    mismatches += 1;
                    mismatch = Some(j);
                    if mismatches > 1 {
                        break;
                    }
                }
            }
            match mismatches {
                0 => {
                    for i in 0..n {
                        mass[i * v + cells[i] as usize] += p;
                    }
                }
                1 => {
                    let j = mismatch.expect("one mismatch recorded");
                    mass[j * v + cells[j] as usize] += p;
                }
                _ => {}
            }
        }

        let mut logits = Vec::with_capacity(n * v);
        for row in mass.chunks(v) {
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::DegenerateContext);
            }
            logits.extend(row.iter().map(|&m| {
                if m > 0.0 {
                    (m / total).ln().max(LOG_ZERO)
                } else {
                    LOG_ZERO
                }
            }));
        }
        PredictorOutput::new(n, v, logits)
    }
}

impl Predictor for MicroDistribution {
    fn predict(&self, grid: &TokenGrid, _class_label: usize) -> Result<PredictorOutput> {
        self.conditionals(grid)
    }

    fn null_class(&self) -> usize {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: u32) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    /// Brute-force marginal: sum of table entries consistent with `fixed`.
    fn brute_marginal(micro: &MicroDistribution, fixed: &[(usize, Token)]) -> f64 {
        (0..micro.outcomes())
            .filter(|&g| {
                let cells = micro.cells_at(g);
                fixed.iter().all(|&(p, t)| cells[p] == t)
            })
            .map(|g| micro.table()[g])
            .sum()
    }

    #[test]
    fn xor_pair_rows() {
        let micro = MicroDistribution::xor_pair();
        let blank = TokenGrid::new_fully_masked(1, 2, vocab(2)).unwrap();
        let out = micro.conditionals(&blank).unwrap();
        for i in 0..2 {
            let p = out.probs(i);
            assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        }
        let half = blank.apply_tokens(&[0], &[0]).unwrap();
        let p = micro.conditionals(&half).unwrap().probs(1);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn uniform_rows_ignore_context() {
        let micro = MicroDistribution::uniform(2, 2, vocab(3)).unwrap();
        let g = TokenGrid::from_cells(2, 2, vocab(3), vec![2, 3, 0, 3]).unwrap();
        let out = micro.conditionals(&g).unwrap();
        for i in 0..4 {
            for p in out.probs(i) {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inconsistent_pair_uses_leave_one_out() {
        let micro = MicroDistribution::xor_pair();
        let g = TokenGrid::from_cells(1, 2, vocab(2), vec![0, 1]).unwrap();
        let out = micro.conditionals(&g).unwrap();
        assert_eq!(out.probs(0), vec![0.0, 1.0]);
        assert_eq!(out.probs(1), vec![1.0, 0.0]);
    }

    #[test]
    fn impossible_context_is_degenerate() {
        let micro = MicroDistribution::xor_pair();
        let g = TokenGrid::from_cells(1, 2, vocab(2), vec![0, 1]).unwrap();
        // widen to a 3-cell table where cell 2 is masked and cells 0, 1 disagree
        let v = vocab(2);
        let mut table = vec![0.0; 8];
        table[0] = 0.5;
        table[7] = 0.5;
        let triple = MicroDistribution::from_table(1, 3, v, table).unwrap();
        let g3 = TokenGrid::from_cells(1, 3, v, vec![0, 1, 2]).unwrap();
        assert!(matches!(triple.conditionals(&g3), Err(Error::DegenerateContext)));
        assert!(micro.conditionals(&g).is_ok());
    }

    #[test]
    fn matches_brute_force_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let micro = MicroDistribution::random(2, 2, vocab(3), &mut rng).unwrap();
        let g = TokenGrid::from_cells(2, 2, vocab(3), vec![1, 3, 2, 3]).unwrap();
        let out = micro.conditionals(&g).unwrap();
        let denom = brute_marginal(&micro, &[(0, 1), (2, 2)]);
        for c in 0..3 {
            let expect = brute_marginal(&micro, &[(0, 1), (2, 2), (1, c)]) / denom;
            assert!((out.probs(1)[c as usize] - expect).abs() < 1e-12);
        }
        // leave-one-out row for the observed cell 0
        let denom = brute_marginal(&micro, &[(2, 2)]);
        for c in 0..3 {
            let expect = brute_marginal(&micro, &[(2, 2), (0, c)]) / denom;
            assert!((out.probs(0)[c as usize] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn table_validation() {
        let v = vocab(2);
        assert!(MicroDistribution::from_table(1, 2, v, vec![0.5, 0.5, 0.0]).is_err());
        assert!(MicroDistribution::from_table(1, 2, v, vec![0.5, 0.6, 0.0, -0.1]).is_err());
        assert!(MicroDistribution::uniform(1, 21, v).is_err());
        assert!(MicroDistribution::uniform(1, 20, v).is_ok());
        let mismatched = TokenGrid::new_fully_masked(2, 2, v).unwrap();
        assert!(MicroDistribution::xor_pair().conditionals(&mismatched).is_err());
    }

    #[test]
    fn index_round_trip() {
        let micro = MicroDistribution::uniform(2, 2, vocab(3)).unwrap();
        for g in 0..81 {
            assert_eq!(micro.index_of(&micro.cells_at(g)), g);
        }
        assert_eq!(micro.cells_at(1), vec![1, 0, 0, 0]);
    }
}

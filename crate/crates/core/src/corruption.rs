//! Random token injection: each context token is independently replaced, with
//! probability `alpha`, by a token drawn uniformly from the same grid's clean
//! tokens (with repetition). Masked cells and cells outside the given context
//! are never touched.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::token::{Token, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub alpha: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(alpha: f64, seed: u64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { alpha, seed })
    }

    /// Corrupts with an RNG stream derived from the seed and the grid contents.
    pub fn apply(
        &self,
        clean: &TokenGrid,
        context: &[usize],
    ) -> Result<(TokenGrid, CorruptionRecord)> {
        let mut hasher = DefaultHasher::new();
        clean.cells().hash(&mut hasher);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ hasher.finish());
        inject_random_tokens(clean, context, self.alpha, &mut rng)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorruptionRecord {
    /// Positions that were resampled, ascending. A resample may land on the
    /// original value; it is still listed here.
    pub replaced: Vec<usize>,
    /// Clean value at each replaced position.
    pub originals: Vec<Token>,
}

impl CorruptionRecord {
    pub fn len(&self) -> usize {
        self.replaced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replaced.is_empty()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha = {alpha} outside [0, 1]")));
    }
    Ok(())
}

pub fn inject_random_tokens<R: Rng + ?Sized>(
    clean: &TokenGrid,
    context: &[usize],
    alpha: f64,
    rng: &mut R,
) -> Result<(TokenGrid, CorruptionRecord)> {
    check_alpha(alpha)?;
    if let Some(&p) = context.iter().find(|&&p| p >= clean.len() || clean.is_masked(p)) {
        return Err(Error::invalid(format!(
            "context position {p} is masked or out of range"
        )));
    }
    let pool: Vec<Token> = clean
        .cells()
        .iter()
        .copied()
        .filter(|&c| c != clean.vocab().mask_id())
        .collect();

    let mut sorted = context.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut corrupted = clean.clone();
    let mut record = CorruptionRecord::default();
    for p in sorted {
        let u: f64 = rng.gen();
        if u < alpha {
            let replacement = pool[rng.gen_range(0..pool.len())];
            record.replaced.push(p);
            record.originals.push(clean.get(p));
            corrupted.set_unchecked(p, replacement);
        }
    }
    Ok((corrupted, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::Vocabulary;
    use proptest::prelude::*;

    fn grid(cells: Vec<Token>, h: usize, w: usize, v: u32) -> TokenGrid {
        TokenGrid::from_cells(h, w, Vocabulary::new(v).unwrap(), cells).unwrap()
    }

    #[test]
    fn alpha_zero_is_identity() {
        let g = grid((0..16).map(|i| i % 5).collect(), 4, 4, 5);
        let ctx: Vec<usize> = (0..16).collect();
        let (c, rec) = CorruptionSpec::new(0.0, 3).unwrap().apply(&g, &ctx).unwrap();
        assert_eq!(c, g);
        assert!(rec.is_empty());
    }

    #[test]
    fn alpha_one_resamples_every_context_cell() {
        let g = grid(vec![0, 1, 2, 2, 7, 7, 7, 9, 3], 3, 3, 10);
        let ctx = vec![0, 2, 4, 8];
        let (c, rec) = CorruptionSpec::new(1.0, 11).unwrap().apply(&g, &ctx).unwrap();
        assert_eq!(rec.replaced, ctx);
        assert_eq!(rec.originals, vec![0, 2, 7, 3]);
        for p in 0..9 {
            assert!(g.cells().contains(&c.get(p)));
            if !ctx.contains(&p) {
                assert_eq!(c.get(p), g.get(p));
            }
        }
    }

    #[test]
    fn masked_context_rejected() {
        let g = grid(vec![0, 4, 1, 1], 2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(inject_random_tokens(&g, &[1], 0.5, &mut rng).is_err());
        assert!(inject_random_tokens(&g, &[4], 0.5, &mut rng).is_err());
        assert!(CorruptionSpec::new(1.5, 0).is_err());
    }

    #[test]
    fn replaced_count_is_binomial() {
        let g = grid((0..1000).map(|i| (i * 7 % 13) as Token).collect(), 25, 40, 13);
        let ctx: Vec<usize> = (0..1000).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 2000;
        let total: usize = (0..trials)
            .map(|_| inject_random_tokens(&g, &ctx, 0.2, &mut rng).unwrap().1.len())
            .sum();
        let mean = total as f64 / trials as f64;
        let se = (1000.0 * 0.2 * 0.8 / trials as f64).sqrt();
        assert!((mean - 200.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    proptest! {
        #[test]
        fn untouched_cells_are_identical(
            cells in prop::collection::vec(0u32..6, 16),
            ctx_mask in prop::collection::vec(any::<bool>(), 16),
            alpha in 0.0f64..=1.0,
            seed: u64,
        ) {
            let g = grid(cells, 4, 4, 6);
            let ctx: Vec<usize> = (0..16).filter(|&i| ctx_mask[i]).collect();
            let spec = CorruptionSpec::new(alpha, seed).unwrap();
            let (c, rec) = spec.apply(&g, &ctx).unwrap();
            prop_assert_eq!(spec.apply(&g, &ctx).unwrap(), (c.clone(), rec.clone()));
            for p in 0..16 {
                if !rec.replaced.contains(&p) {
                    prop_assert_eq!(c.get(p), g.get(p));
                } else {
                    prop_assert!(ctx.contains(&p));
                    prop_assert!(g.cells().contains(&c.get(p)));
                }
            }
        }
    }
}

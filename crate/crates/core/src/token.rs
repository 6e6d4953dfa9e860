//! Token grids, vocabularies and masking.
//!
//! Positions are flat row-major indices `i = y * width + x`. The mask sentinel
//! is `vocab.size()`, one past the last codebook entry, so a neural embedding
//! table of `size + 1` rows covers it without special cases.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!("vocabulary size must be >= 2, got {size}")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn mask_id(&self) -> Token {
        self.size
    }

    pub fn contains(&self, token: Token) -> bool {
        token < self.size
    }
}

/// Which cells of a grid are still masked. Always derived from a grid, never
/// stored alongside one, so it cannot drift out of sync.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskState {
    pub masked: Vec<bool>,
}

impl MaskState {
    pub fn context(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    vocab: Vocabulary,
    cells: Vec<Token>,
}

impl TokenGrid {
    pub fn new_fully_masked(height: usize, width: usize, vocab: Vocabulary) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            vocab,
            cells: vec![vocab.mask_id(); height * width],
        })
    }

    /// Builds a grid from raw cells; any cell equal to the mask id is masked.
    pub fn from_cells(
        height: usize,
        width: usize,
        vocab: Vocabulary,
        cells: Vec<Token>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if cells.len() != height * width {
            return Err(Error::invalid(format!(
                "expected {} cells for a {height}x{width} grid, got {}",
                height * width,
                cells.len()
            )));
        }
        if let Some((i, &c)) = cells.iter().enumerate().find(|(_, &c)| c > vocab.mask_id()) {
            return Err(Error::invalid(format!(
                "cell {i} holds {c}, outside [0, {}]",
                vocab.mask_id()
            )));
        }
        Ok(Self {
            height,
            width,
            vocab,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn cells(&self) -> &[Token] {
        &self.cells
    }

    pub fn get(&self, position: usize) -> Token {
        self.cells[position]
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.cells[position] == self.vocab.mask_id()
    }

    pub fn mask_state(&self) -> MaskState {
        MaskState {
            masked: self.cells.iter().map(|&c| c == self.vocab.mask_id()).collect(),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == self.vocab.mask_id()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.masked_count() == 0
    }

    /// Unmasked positions in ascending order.
    pub fn context_positions(&self) -> Vec<usize> {
        let mask = self.vocab.mask_id();
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c != mask).then_some(i))
            .collect()
    }

    pub fn apply_tokens(&self, positions: &[usize], values: &[Token]) -> Result<Self> {
        let mut out = self.clone();
        out.apply_tokens_in_place(positions, values)?;
        Ok(out)
    }

    /// Writes `values` at `positions`, clearing the mask there. Validation
    /// happens before any cell is touched.
    pub fn apply_tokens_in_place(&mut self, positions: &[usize], values: &[Token]) -> Result<()> {
        if positions.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} positions but {} values",
                positions.len(),
                values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(positions.len());
        for (&p, &v) in positions.iter().zip(values) {
            if p >= self.cells.len() {
                return Err(Error::invalid(format!(
                    "position {p} out of range for {} cells",
                    self.cells.len()
                )));
            }
            if !seen.insert(p) {
                return Err(Error::invalid(format!("duplicate position {p}")));
            }
            if !self.vocab.contains(v) {
                return Err(Error::invalid(format!(
                    "token {v} outside codebook [0, {})",
                    self.vocab.size()
                )));
            }
        }
        for (&p, &v) in positions.iter().zip(values) {
            self.cells[p] = v;
        }
        Ok(())
    }

    /// Sets the given positions back to the mask sentinel.
    pub fn mask_positions(&mut self, positions: &[usize]) -> Result<()> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cells.len()) {
            return Err(Error::invalid(format!("position {p} out of range")));
        }
        let mask = self.vocab.mask_id();
        for &p in positions {
            self.cells[p] = mask;
        }
        Ok(())
    }

    pub(crate) fn set_unchecked(&mut self, position: usize, value: Token) {
        debug_assert!(value <= self.vocab.mask_id());
        self.cells[position] = value;
    }
}

impl fmt::Display for TokenGrid {
    /// One text row per grid row, space separated, masked cells as `M`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.cells.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|&c| {
                    if c == self.vocab.mask_id() {
                        "M".to_string()
                    } else {
                        c.to_string()
                    }
                })
                .collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(n: u32) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    #[test]
    fn fully_masked_examples() {
        let g = TokenGrid::new_fully_masked(2, 2, v(3)).unwrap();
        assert_eq!(g.cells(), &[3, 3, 3, 3]);
        assert!(g.mask_state().masked.iter().all(|&m| m));

        let g = TokenGrid::new_fully_masked(1, 1, v(2)).unwrap();
        assert_eq!(g.cells(), &[2]);

        let g = TokenGrid::new_fully_masked(16, 16, v(4096)).unwrap();
        assert_eq!(g.len(), 256);
        assert!(g.cells().iter().all(|&c| c == 4096));
        assert!(g.context_positions().is_empty());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            TokenGrid::new_fully_masked(0, 3, v(2)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(TokenGrid::new_fully_masked(3, 0, v(2)).is_err());
    }

    #[test]
    fn vocabulary_needs_two_tokens() {
        assert!(Vocabulary::new(1).is_err());
        assert_eq!(v(2).mask_id(), 2);
    }

    #[test]
    fn apply_tokens_examples() {
        let g = TokenGrid::new_fully_masked(2, 2, v(3)).unwrap();
        assert_eq!(g.apply_tokens(&[0], &[1]).unwrap().cells(), &[1, 3, 3, 3]);
        assert_eq!(g.apply_tokens(&[], &[]).unwrap(), g);
        assert_eq!(g.apply_tokens(&[0, 3], &[2, 0]).unwrap().cells(), &[2, 3, 3, 0]);
    }

    #[test]
    fn apply_tokens_errors() {
        let g = TokenGrid::new_fully_masked(2, 2, v(3)).unwrap();
        assert!(g.apply_tokens(&[1, 1], &[0, 0]).is_err());
        assert!(g.apply_tokens(&[1], &[3]).is_err());
        assert!(g.apply_tokens(&[4], &[0]).is_err());
        assert!(g.apply_tokens(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn context_positions_examples() {
        let g = TokenGrid::from_cells(2, 2, v(3), vec![1, 3, 2, 3]).unwrap();
        assert_eq!(g.context_positions(), vec![0, 2]);
        let g = TokenGrid::from_cells(2, 2, v(3), vec![0, 1, 2, 0]).unwrap();
        assert_eq!(g.context_positions(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn display_marks_masked_cells() {
        let g = TokenGrid::from_cells(2, 2, v(3), vec![1, 3, 2, 0]).unwrap();
        assert_eq!(g.to_string(), "1 M\n2 0\n");
    }

    proptest! {
        #[test]
        fn mask_consistency_under_random_writes(
            h in 1usize..6, w in 1usize..6, size in 2u32..9,
            ops in prop::collection::vec((0usize..36, 0u32..9), 0..40),
        ) {
            let vocab = v(size);
            let mut g = TokenGrid::new_fully_masked(h, w, vocab).unwrap();
            let mut written = HashSet::new();
            for (p, val) in ops {
                let p = p % g.len();
                let val = val % size;
                let once = g.apply_tokens(&[p], &[val]).unwrap();
                // idempotent for identical writes
                prop_assert_eq!(once.apply_tokens(&[p], &[val]).unwrap(), once.clone());
                g = once;
                written.insert(p);
                let state = g.mask_state();
                for i in 0..g.len() {
                    prop_assert_eq!(state.masked[i], g.get(i) == vocab.mask_id());
                }
                prop_assert_eq!(g.context_positions().len(), written.len());
            }
        }

        #[test]
        fn revealing_everything_fills_context(h in 1usize..8, w in 1usize..8) {
            let g = TokenGrid::new_fully_masked(h, w, v(4)).unwrap();
            prop_assert!(g.context_positions().is_empty());
            let positions: Vec<usize> = (0..h * w).collect();
            let values: Vec<Token> = positions.iter().map(|&p| (p % 4) as Token).collect();
            let full = g.apply_tokens(&positions, &values).unwrap();
            prop_assert_eq!(full.context_positions().len(), h * w);
            prop_assert!(full.is_complete());
        }
    }
}

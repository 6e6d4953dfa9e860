//! Building one corrupted training input from a clean grid.

use rand::Rng;

use crate::corruption::inject_random_tokens;
use crate::error::{Error, Result};
use crate::sequencing::{build_order, group_sizes, partition, roll, OrderPlan};
use crate::token::TokenGrid;

use super::config::TrainConfig;
use super::loss::{TargetRole, Targets};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Model input: groups `0..s` revealed then corrupted, the rest masked.
    pub input: TokenGrid,
    pub targets: Targets,
    /// Class fed to the model (the null class after label dropout).
    pub label: usize,
    pub step: usize,
    pub plan: OrderPlan,
    /// Context positions whose value was resampled.
    pub corrupted: Vec<usize>,
}

/// Draws the label dropout, the order roll, the step `s` and the corruption
/// from `rng`, in that order.
pub fn build_training_example<R: Rng + ?Sized>(
    clean: &TokenGrid,
    label: usize,
    null_class: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingExample> {
    if !clean.is_complete() {
        return Err(Error::invalid("training grids must be fully observed"));
    }
    let (h, w) = (clean.height(), clean.width());
    let n = clean.len();

    let label = if rng.gen::<f64>() < config.cfg_dropout {
        null_class
    } else {
        label
    };

    let order_seed: u64 = rng.gen();
    let mut plan = build_order(config.order, h, w, order_seed);
    if config.roll {
        plan = roll(&plan, rng.gen_range(0..n));
    }
    let schedule = group_sizes(n, config.steps, config.scheduler)?;
    let groups = partition(&plan, &schedule)?;
    let step = rng.gen_range(0..config.steps);

    let context = groups.prefix(step);
    let (mut input, record) = inject_random_tokens(clean, &context, config.alpha, rng)?;
    input.mask_positions(&groups.suffix(step))?;

    let mut roles = vec![TargetRole::Ignored; n];
    for &p in &context {
        roles[p] = TargetRole::Context;
    }
    for &p in &groups.groups[step] {
        roles[p] = TargetRole::Next;
    }
    Ok(TrainingExample {
        input,
        targets: Targets {
            clean: clean.cells().to_vec(),
            roles,
        },
        label,
        step,
        plan,
        corrupted: record.replaced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::Vocabulary;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clean(seed: u64) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = (0..36).map(|_| rng.gen_range(0..7)).collect();
        TokenGrid::from_cells(6, 6, Vocabulary::new(7).unwrap(), cells).unwrap()
    }

    #[test]
    fn rejects_masked_input() {
        let g = TokenGrid::new_fully_masked(2, 2, Vocabulary::new(3).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_training_example(&g, 0, 1, &TrainConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn label_dropout_extremes() {
        let g = clean(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = TrainConfig {
            cfg_dropout: 1.0,
            steps: 4,
            ..TrainConfig::default()
        };
        assert_eq!(build_training_example(&g, 2, 9, &cfg, &mut rng).unwrap().label, 9);
        cfg.cfg_dropout = 0.0;
        assert_eq!(build_training_example(&g, 2, 9, &cfg, &mut rng).unwrap().label, 2);
    }

    #[test]
    fn four_cells_two_groups_second_step() {
        let g = TokenGrid::from_cells(2, 2, Vocabulary::new(3).unwrap(), vec![0, 1, 2, 0]).unwrap();
        let cfg = TrainConfig {
            steps: 2,
            scheduler: crate::sequencing::SchedulerKind::Linear,
            alpha: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = loop {
            let ex = build_training_example(&g, 0, 1, &cfg, &mut rng).unwrap();
            if ex.step == 1 {
                break ex;
            }
        };
        assert_eq!(ex.input.masked_count(), 2);
        assert_eq!(ex.targets.positions(TargetRole::Context).len(), 2);
        assert_eq!(ex.targets.positions(TargetRole::Next).len(), 2);
        for p in ex.targets.positions(TargetRole::Context) {
            assert_eq!(ex.input.get(p), g.get(p));
        }
    }

    proptest! {
        #[test]
        fn example_structure(seed in any::<u64>(), steps in 1usize..12, alpha in 0.0f64..1.0) {
            let g = clean(seed);
            let cfg = TrainConfig { steps, alpha, ..TrainConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let ex = build_training_example(&g, 0, 1, &cfg, &mut rng).unwrap();
            prop_assert!(ex.step < steps);
            prop_assert!(!ex.targets.positions(TargetRole::Next).is_empty());
            for p in 0..g.len() {
                match ex.targets.roles[p] {
                    TargetRole::Context => {
                        prop_assert!(!ex.input.is_masked(p));
                        if !ex.corrupted.contains(&p) {
                            prop_assert_eq!(ex.input.get(p), g.get(p));
                        }
                    }
                    TargetRole::Next | TargetRole::Ignored => prop_assert!(ex.input.is_masked(p)),
                }
                prop_assert_eq!(ex.targets.clean[p], g.get(p));
            }
            prop_assert_eq!(ex.corrupted.len() <= ex.targets.positions(TargetRole::Context).len(), true);
            if ex.step == 0 {
                prop_assert_eq!(ex.targets.positions(TargetRole::Context).len(), 0);
            }
        }
    }
}

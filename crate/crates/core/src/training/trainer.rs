//! Minibatch training loop with resumable state.
//!
//! Every random draw of step `t` comes from streams seeded by
//! `(seed, t, example)`, so a run resumed from a checkpoint replays exactly
//! the batches an uninterrupted run would have seen.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{backward, forward, Checkpoint, ModelConfig, Parameters, Real};
use crate::token::TokenGrid;

use super::config::TrainConfig;
use super::example::{build_training_example, TrainingExample};
use super::loss::{objective, LossParts};
use super::optim::{clip_grad_norm, AdamW};

/// A clean grid and its class label.
pub type LabeledGrid = (TokenGrid, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMetrics {
    pub step: usize,
    pub loss_next: f64,
    pub loss_context: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl TrainMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_next,loss_context,loss,grad_norm,lr";
}

impl fmt::Display for TrainMetrics {
    /// One CSV row matching [`TrainMetrics::CSV_HEADER`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.step, self.loss_next, self.loss_context, self.loss, self.grad_norm, self.lr
        )
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, step, lane)`.
pub(crate) fn stream(seed: u64, step: u64, lane: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(step)) ^ lane))
}

/// Loss of one example and `weight * dL/dtheta` accumulated into `grads`.
pub fn accumulate_example<T: Real>(
    params: &Parameters<T>,
    example: &TrainingExample,
    weight: f64,
    dropout: Option<&mut dyn RngCore>,
    grads: &mut Parameters<T>,
) -> Result<LossParts> {
    let (logits, cache) = forward(params, example.input.cells(), example.label, dropout)?;
    let vocab = params.config.vocab as usize;
    let (parts, dlogits) = objective(&logits, vocab, &example.targets, weight)?;
    backward(params, &cache, &dlogits, grads)?;
    Ok(parts)
}

#[derive(Debug, Clone)]
pub struct Trainer<T = f32> {
    pub config: TrainConfig,
    pub params: Parameters<T>,
    pub optimizer: AdamW<T>,
    /// Number of completed optimizer steps.
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    /// Fresh weights drawn from the config seed. The model's dropout rate is
    /// taken from the training config.
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = model.clone();
        model.dropout = config.dropout;
        model.validate()?;
        let mut rng = stream(config.seed, u64::MAX, 0);
        let params = Parameters::init(&model, &mut rng)?;
        let optimizer = AdamW::new(&params);
        Ok(Self {
            config,
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Builds the examples of the current step without touching the weights.
    pub fn prepare_batch(&self, data: &[LabeledGrid]) -> Result<Vec<TrainingExample>> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let cfg = self.model_config();
        if let Some((g, l)) = data.iter().find(|(g, l)| {
            g.height() != cfg.height
                || g.width() != cfg.width
                || g.vocab().size() != cfg.vocab
                || *l >= cfg.num_classes
        }) {
            return Err(Error::invalid(format!(
                "training grid {}x{} (V={}, label {l}) does not fit model {}x{} (V={}, {} classes)",
                g.height(),
                g.width(),
                g.vocab().size(),
                cfg.height,
                cfg.width,
                cfg.vocab,
                cfg.num_classes
            )));
        }
        let mut pick = stream(self.config.seed, self.step as u64, 0);
        (0..self.config.batch_size)
            .map(|b| {
                let (grid, label) = &data[pick.gen_range(0..data.len())];
                let mut rng = stream(self.config.seed, self.step as u64, 1 + 2 * b as u64);
                build_training_example(grid, *label, cfg.null_class(), &self.config, &mut rng)
            })
            .collect()
    }

    /// One optimizer update on prepared examples.
    pub fn step_on(&mut self, batch: &[TrainingExample]) -> Result<TrainMetrics> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let weight = 1.0 / batch.len() as f64;
        let mut grads = self.params.zeros_like();
        let mut next = 0.0;
        let mut context = 0.0;
        for (b, ex) in batch.iter().enumerate() {
            let mut drop_rng = stream(self.config.seed, self.step as u64, 2 + 2 * b as u64);
            let dropout: Option<&mut dyn RngCore> = if self.params.config.dropout > 0.0 {
                Some(&mut drop_rng)
            } else {
                None
            };
            let parts = accumulate_example(&self.params, ex, weight, dropout, &mut grads)?;
            next += parts.next * weight;
            context += parts.context * weight;
        }
        if !grads.all_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite gradient at step {}",
                self.step
            )));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip_norm);
        let lr = self.config.lr_at(self.step);
        self.optimizer
            .update(&mut self.params, &grads, lr, &self.config.adamw());
        if !self.params.all_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite weights after step {}",
                self.step
            )));
        }
        let metrics = TrainMetrics {
            step: self.step,
            loss_next: next,
            loss_context: context,
            loss: next + context,
            grad_norm,
            lr,
        };
        self.step += 1;
        Ok(metrics)
    }

    pub fn train_step(&mut self, data: &[LabeledGrid]) -> Result<TrainMetrics> {
        let batch = self.prepare_batch(data)?;
        self.step_on(&batch)
    }

    /// Weights, optimizer moments, step counter and training config.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.cast());
        ck.metadata.insert("step".into(), self.step.to_string());
        ck.metadata.insert("adam_t".into(), self.optimizer.t.to_string());
        for (k, v) in self.config.to_entries() {
            ck.metadata.insert(format!("train.{k}"), v);
        }
        for (prefix, moments) in [("adam_m", &self.optimizer.m), ("adam_v", &self.optimizer.v)] {
            for (name, t) in moments.tensors() {
                ck.extra.insert(format!("{prefix}.{name}"), t.cast());
            }
        }
        ck
    }

    /// Restores a run. Training settings stored in the checkpoint are used
    /// unless overridden by `config`; the model shape always comes from the
    /// checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => c,
            None => {
                let mut c = TrainConfig::default();
                for (k, v) in &ck.metadata {
                    if let Some(key) = k.strip_prefix("train.") {
                        c.set(key, v)?;
                    }
                }
                c
            }
        };
        config.validate()?;
        let step: usize = ck
            .meta("step")
            .ok_or_else(|| Error::invalid("checkpoint lacks a step counter"))?;
        let adam_t: u64 = ck.meta("adam_t").unwrap_or(0);
        let mut params: Parameters<T> = ck.params.cast();
        params.config.dropout = config.dropout;
        params.config.validate()?;
        let mut optimizer = AdamW::new(&params);
        optimizer.t = adam_t;
        for (prefix, moments) in [("adam_m", &mut optimizer.m), ("adam_v", &mut optimizer.v)] {
            for (name, slot) in moments.tensors_mut() {
                let key = format!("{prefix}.{name}");
                match ck.extra.get(&key) {
                    Some(t) if t.shape == slot.shape => *slot = t.cast(),
                    Some(t) => {
                        return Err(Error::invalid(format!(
                            "optimizer tensor {key} has shape {:?}, expected {:?}",
                            t.shape, slot.shape
                        )))
                    }
                    None if adam_t == 0 => {}
                    None => return Err(Error::invalid(format!("checkpoint lacks {key}"))),
                }
            }
        }
        Ok(Self {
            config,
            params,
            optimizer,
            step,
        })
    }
}

/// Mean `L_next + L_context` over prepared examples with dropout off.
pub fn evaluate_loss<T: Real>(params: &Parameters<T>, batch: &[TrainingExample]) -> Result<LossParts> {
    let vocab = params.config.vocab as usize;
    let mut total = LossParts::default();
    for ex in batch {
        let (logits, _) = forward(params, ex.input.cells(), ex.label, None)?;
        let (parts, _) = objective(&logits, vocab, &ex.targets, 1.0)?;
        total.next += parts.next / batch.len() as f64;
        total.context += parts.context / batch.len() as f64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use crate::sequencing::OrderKind;

    fn tensor_rel_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
        let (mut diff, mut norm) = (0.0, 0.0);
        for (x, y) in a.data.iter().zip(&b.data) {
            let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
            diff += (x - y) * (x - y);
            norm += x * x + y * y;
        }
        if norm == 0.0 {
            0.0
        } else {
            diff.sqrt() / norm.sqrt()
        }
    }
    use crate::token::Vocabulary;

    fn data(n: usize, h: usize, w: usize, v: u32, seed: u64) -> Vec<LabeledGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let cells = (0..h * w).map(|_| rng.gen_range(0..v)).collect();
                let g = TokenGrid::from_cells(h, w, Vocabulary::new(v).unwrap(), cells).unwrap();
                (g, i % 2)
            })
            .collect()
    }

    fn small() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig::new(1, 16, 2, 5, 3, 3, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            total_steps: 40,
            warmup_steps: 2,
            learning_rate: 3e-3,
            steps: 3,
            ..TrainConfig::default()
        };
        (model, cfg)
    }

    #[test]
    fn metrics_row_matches_header() {
        let m = TrainMetrics {
            step: 3,
            loss_next: 1.5,
            loss_context: 0.25,
            loss: 1.75,
            grad_norm: 2.0,
            lr: 1e-4,
        };
        assert_eq!(m.to_string().split(',').count(), TrainMetrics::CSV_HEADER.split(',').count());
        assert!(m.to_string().starts_with("3,1.5,0.25,1.75"));
    }

    /// Backprop through the whole objective against central differences of
    /// the loss, per tensor.
    #[test]
    fn full_gradient_matches_finite_differences() {
        let model = ModelConfig::new(1, 8, 2, 3, 2, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = Parameters::<f64>::random(&model, 0.5, &mut rng).unwrap();
        let cfg = TrainConfig {
            alpha: 0.5,
            steps: 2,
            cfg_dropout: 0.0,
            ..TrainConfig::default()
        };
        let grid = data(1, 2, 2, 3, 9).remove(0).0;
        let mut ex_rng = ChaCha8Rng::seed_from_u64(1);
        let ex = loop {
            let ex = build_training_example(&grid, 1, 2, &cfg, &mut ex_rng).unwrap();
            if ex.step == 1 {
                break ex;
            }
        };
        let mut grads = params.zeros_like();
        accumulate_example(&params, &ex, 1.0, None, &mut grads).unwrap();

        let loss = |p: &Parameters<f64>| evaluate_loss(p, std::slice::from_ref(&ex)).unwrap().total();
        let h = 1e-5;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = params.tensors()[ti].1.len();
            let mut fd = Tensor::<f64>::zeros(&params.tensors()[ti].1.shape);
            for k in 0..len {
                let mut up = params.clone();
                up.tensors_mut()[ti].1.data[k] += h;
                let mut dn = params.clone();
                dn.tensors_mut()[ti].1.data[k] -= h;
                fd.data[k] = (loss(&up) - loss(&dn)) / (2.0 * h);
            }
            let err = tensor_rel_error(&fd, grads.tensors()[ti].1);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let (model, cfg) = small();
        let d = data(4, 3, 3, 5, 0);
        let mut t = Trainer::<f32>::new(&model, TrainConfig { dropout: 0.0, ..cfg }).unwrap();
        let batch = t.prepare_batch(&d).unwrap();
        let before = evaluate_loss(&t.params, &batch).unwrap().total();
        for _ in 0..30 {
            t.step_on(&batch).unwrap();
        }
        let after = evaluate_loss(&t.params, &batch).unwrap().total();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn two_steps_each_lower_the_loss() {
        let (model, cfg) = small();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 0,
            dropout: 0.0,
            ..cfg
        };
        let mut t = Trainer::<f32>::new(&model, cfg).unwrap();
        let batch = t.prepare_batch(&data(4, 3, 3, 5, 6)).unwrap();
        let l0 = evaluate_loss(&t.params, &batch).unwrap().total();
        t.step_on(&batch).unwrap();
        let l1 = evaluate_loss(&t.params, &batch).unwrap().total();
        t.step_on(&batch).unwrap();
        let l2 = evaluate_loss(&t.params, &batch).unwrap().total();
        assert!(l1 < l0 && l2 < l1, "{l0} {l1} {l2}");
    }

    #[test]
    fn metrics_total_is_the_sum() {
        let (model, cfg) = small();
        let mut t = Trainer::<f32>::new(&model, cfg).unwrap();
        let m = t.train_step(&data(4, 3, 3, 5, 1)).unwrap();
        assert!((m.loss - (m.loss_next + m.loss_context)).abs() < 1e-12);
    }

    #[test]
    fn reloaded_checkpoint_gives_identical_logits() {
        let (model, cfg) = small();
        let mut t = Trainer::<f32>::new(&model, cfg).unwrap();
        let d = data(4, 3, 3, 5, 2);
        t.train_step(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mfx");
        t.to_checkpoint().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let cells = d[0].0.cells();
        let (a, _) = forward(&t.params, cells, 1, None).unwrap();
        let (b, _) = forward(&back.params, cells, 1, None).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn resume_is_bit_identical() {
        let (model, cfg) = small();
        let cfg = TrainConfig {
            order: OrderKind::Random,
            ..cfg
        };
        let d = data(6, 3, 3, 5, 3);
        let mut a = Trainer::<f32>::new(&model, cfg.clone()).unwrap();
        for _ in 0..3 {
            a.train_step(&d).unwrap();
        }
        let bytes = a.to_checkpoint().encode().unwrap();
        let mut b = Trainer::<f32>::from_checkpoint(&Checkpoint::decode(&bytes).unwrap(), None).unwrap();
        assert_eq!(b.config, cfg);
        assert_eq!(b.step, 3);
        for _ in 0..3 {
            let ma = a.train_step(&d).unwrap();
            let mb = b.train_step(&d).unwrap();
            assert_eq!(ma, mb);
        }
        assert_eq!(a.params, b.params);
        assert_eq!(a.optimizer, b.optimizer);
    }

    #[test]
    fn rejects_mismatched_data() {
        let (model, cfg) = small();
        let t = Trainer::<f32>::new(&model, cfg).unwrap();
        assert!(t.prepare_batch(&[]).is_err());
        assert!(t.prepare_batch(&data(2, 2, 2, 5, 0)).is_err());
        let mut bad = data(1, 3, 3, 5, 0);
        bad[0].1 = 2;
        assert!(t.prepare_batch(&bad).is_err());
    }
}

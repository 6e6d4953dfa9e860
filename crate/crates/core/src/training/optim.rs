//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup / constant / cosine-tail learning-rate schedule.

use std::f64::consts::PI;

use crate::nn::{Parameters, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>, lr: f64, s: &AdamWSettings) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let b1 = T::lit(s.beta1);
        let b2 = T::lit(s.beta2);
        let one = T::one();
        let decay = T::lit(1.0 - lr * s.weight_decay);
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(s.eps);

        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(ms)
            .zip(vs)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] * decay - step * m.data[i] / denom;
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Parameters<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Fraction of `total_steps` at the end over which the rate decays to zero.
    pub decay_tail_fraction: f64,
}

impl LrSchedule {
    pub fn decay_start(&self) -> usize {
        let tail = (self.decay_tail_fraction * self.total_steps as f64).ceil() as usize;
        self.total_steps - tail.min(self.total_steps)
    }

    /// Linear warmup from 0, constant, then a half-cosine reaching 0 at the
    /// last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let start = self.decay_start();
        let decay = if step < start {
            1.0
        } else {
            let len = (self.total_steps - start) as f64;
            let progress = ((step - start + 1) as f64 / len).min(1.0);
            0.5 * (1.0 + (PI * progress).cos())
        };
        self.base * warm * decay
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> Parameters<f64> {
        let cfg = ModelConfig::new(1, 8, 2, 3, 2, 2, 1).unwrap();
        Parameters::random(&cfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn table8() -> LrSchedule {
        LrSchedule {
            base: 1e-4,
            warmup_steps: 2500,
            total_steps: 400_000,
            decay_tail_fraction: 0.1,
        }
    }

    #[test]
    fn schedule_examples() {
        let s = table8();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(2500), 1e-4);
        assert_eq!(s.lr_at(1250), 0.5e-4);
        assert_eq!(s.lr_at(359_999), 1e-4);
        assert!(s.lr_at(360_000) < 1e-4);
        assert!(s.lr_at(399_999) < 1e-6 * 1e-4);
        let lrs: Vec<f64> = (360_000..400_000).step_by(1000).map(|t| s.lr_at(t)).collect();
        assert!(lrs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn short_runs_reach_zero() {
        let s = LrSchedule {
            base: 1.0,
            warmup_steps: 2,
            total_steps: 10,
            decay_tail_fraction: 0.1,
        };
        assert_eq!(s.decay_start(), 9);
        assert!(s.lr_at(9) < 1e-12);
        assert_eq!(s.lr_at(8), 1.0);
    }

    #[test]
    fn clipping_hits_the_target_norm() {
        let mut g = params();
        let n = g.global_norm();
        g.scale(10.0 / n);
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 10.0).abs() < 1e-9);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
        let before = g.clone();
        clip_grad_norm(&mut g, 5.0);
        assert_eq!(g, before);
    }

    #[test]
    fn zero_gradients_only_decay() {
        let p0 = params();
        let zero = p0.zeros_like();
        let mut p = p0.clone();
        let mut opt = AdamW::new(&p);
        let s = AdamWSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        opt.update(&mut p, &zero, 1e-3, &s);
        assert_eq!(p, p0);

        let s = AdamWSettings {
            weight_decay: 0.03,
            ..s
        };
        for _ in 0..3 {
            opt.update(&mut p, &zero, 1e-2, &s);
        }
        let factor = (1.0 - 1e-2 * 0.03f64).powi(3);
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(p0.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y * factor).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = params();
        let p0 = p.clone();
        let mut g = p.zeros_like();
        g.head_b.data = vec![0.5, -2.0, 0.0];
        let mut opt = AdamW::new(&p);
        let s = AdamWSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        opt.update(&mut p, &g, 0.1, &s);
        assert!((p.head_b.data[0] - (p0.head_b.data[0] - 0.1)).abs() < 1e-6);
        assert!((p.head_b.data[1] - (p0.head_b.data[1] + 0.1)).abs() < 1e-6);
        assert_eq!(p.head_b.data[2], p0.head_b.data[2]);
    }
}

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{count_parameters, ModelConfig};
use super::ops::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn fill_normal<R: Rng + ?Sized>(&mut self, std: f64, truncate: Option<f64>, rng: &mut R) {
        for v in &mut self.data {
            let z = loop {
                let z: f64 = StandardNormal.sample(rng);
                match truncate {
                    Some(t) if z.abs() > t => continue,
                    _ => break z,
                }
            };
            *v = T::lit(z * std);
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::lit(x.to_f64().expect("finite scalar")))
                .collect(),
        }
    }
}

/// Fixed 2D sine/cosine table used as the starting point of the learned
/// positional embedding: the first half of each row encodes the grid row, the
/// second half the column, each as `sin(r w_k), cos(r w_k)` with
/// `w_k = 10000^(-k / (d/4))`. Dimensions beyond `4 * (d / 4)` stay zero.
pub fn sincos_positions<T: Real>(config: &ModelConfig) -> Tensor<T> {
    let d = config.hidden_dim;
    let q = d / 4;
    let mut t = Tensor::zeros(&[config.positions(), d]);
    for r in 0..config.height {
        for c in 0..config.width {
            let row = &mut t.data[(r * config.width + c) * d..][..d];
            for k in 0..q {
                let omega = 10000f64.powf(-(k as f64) / q as f64);
                row[k] = T::lit((r as f64 * omega).sin());
                row[q + k] = T::lit((r as f64 * omega).cos());
                row[2 * q + k] = T::lit((c as f64 * omega).sin());
                row[3 * q + k] = T::lit((c as f64 * omega).cos());
            }
        }
    }
    t
}

/// Weights of one transformer block. Linear weights are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    /// Projects SiLU(class embedding) to shift/scale/gate for both sublayers.
    pub ada_w: Tensor<T>,
    pub ada_b: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Real> BlockParams<T> {
    fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let f = config.mlp_dim();
        Self {
            ada_w: Tensor::zeros(&[d, 6 * d]),
            ada_b: Tensor::zeros(&[6 * d]),
            qkv_w: Tensor::zeros(&[d, 3 * d]),
            qkv_b: Tensor::zeros(&[3 * d]),
            proj_w: Tensor::zeros(&[d, d]),
            proj_b: Tensor::zeros(&[d]),
            fc1_w: Tensor::zeros(&[d, f]),
            fc1_b: Tensor::zeros(&[f]),
            fc2_w: Tensor::zeros(&[f, d]),
            fc2_b: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 10] {
        [
            ("ada_b", &self.ada_b),
            ("ada_w", &self.ada_w),
            ("fc1_b", &self.fc1_b),
            ("fc1_w", &self.fc1_w),
            ("fc2_b", &self.fc2_b),
            ("fc2_w", &self.fc2_w),
            ("proj_b", &self.proj_b),
            ("proj_w", &self.proj_w),
            ("qkv_b", &self.qkv_b),
            ("qkv_w", &self.qkv_w),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 10] {
        [
            ("ada_b", &mut self.ada_b),
            ("ada_w", &mut self.ada_w),
            ("fc1_b", &mut self.fc1_b),
            ("fc1_w", &mut self.fc1_w),
            ("fc2_b", &mut self.fc2_b),
            ("fc2_w", &mut self.fc2_w),
            ("proj_b", &mut self.proj_b),
            ("proj_w", &mut self.proj_w),
            ("qkv_b", &mut self.qkv_b),
            ("qkv_w", &mut self.qkv_w),
        ]
    }
}

/// All trainable tensors of the model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    /// `(V + 1) x d`; row `V` embeds the mask token.
    pub tok_emb: Tensor<T>,
    /// `n x d`, learned.
    pub pos_emb: Tensor<T>,
    /// `(num_classes + 1) x d`; the last row is the null class.
    pub cls_emb: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// Final adaLN: shift and scale only.
    pub final_ada_w: Tensor<T>,
    pub final_ada_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let v = config.vocab as usize;
        Self {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[v + 1, d]),
            pos_emb: Tensor::zeros(&[config.positions(), d]),
            cls_emb: Tensor::zeros(&[config.num_classes + 1, d]),
            blocks: (0..config.layers).map(|_| BlockParams::zeros(config)).collect(),
            final_ada_w: Tensor::zeros(&[d, 2 * d]),
            final_ada_b: Tensor::zeros(&[2 * d]),
            head_w: Tensor::zeros(&[d, v]),
            head_b: Tensor::zeros(&[v]),
        }
    }

    /// Truncated-normal (std 0.02) embeddings and attention/MLP weights, zero
    /// biases, zero adaLN projections (identity modulation) and a zero head.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let trunc = Some(2.0);
        p.tok_emb.fill_normal(0.02, trunc, rng);
        p.pos_emb = sincos_positions(config);
        p.cls_emb.fill_normal(0.02, trunc, rng);
        for b in &mut p.blocks {
            b.qkv_w.fill_normal(0.02, trunc, rng);
            b.proj_w.fill_normal(0.02, trunc, rng);
            b.fc1_w.fill_normal(0.02, trunc, rng);
            b.fc2_w.fill_normal(0.02, trunc, rng);
        }
        Ok(p)
    }

    /// Every tensor drawn from `N(0, std^2)`; used for gradient checks where a
    /// zero-initialized path would hide errors.
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        for (_, t) in p.tensors_mut() {
            t.fill_normal(std, None, rng);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// `(name, tensor)` pairs sorted by name.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("cls_emb".into(), &self.cls_emb),
            ("final_ada_b".into(), &self.final_ada_b),
            ("final_ada_w".into(), &self.final_ada_w),
            ("head_b".into(), &self.head_b),
            ("head_w".into(), &self.head_w),
            ("pos_emb".into(), &self.pos_emb),
            ("tok_emb".into(), &self.tok_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{l}.{n}"), t)));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("cls_emb".into(), &mut self.cls_emb),
            ("final_ada_b".into(), &mut self.final_ada_b),
            ("final_ada_w".into(), &mut self.final_ada_w),
            ("head_b".into(), &mut self.head_b),
            ("head_w".into(), &mut self.head_w),
            ("pos_emb".into(), &mut self.pos_emb),
            ("tok_emb".into(), &mut self.tok_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut().into_iter().map(|(n, t)| (format!("blocks.{l}.{n}"), t)));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    /// Euclidean norm over every scalar, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|&x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            cls_emb: self.cls_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ada_w: b.ada_w.cast(),
                    ada_b: b.ada_b.cast(),
                    qkv_w: b.qkv_w.cast(),
                    qkv_b: b.qkv_b.cast(),
                    proj_w: b.proj_w.cast(),
                    proj_b: b.proj_b.cast(),
                    fc1_w: b.fc1_w.cast(),
                    fc1_b: b.fc1_b.cast(),
                    fc2_w: b.fc2_w.cast(),
                    fc2_b: b.fc2_b.cast(),
                })
                .collect(),
            final_ada_w: self.final_ada_w.cast(),
            final_ada_b: self.final_ada_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::zeros(&self.config);
        for ((name, a), (_, b)) in self.tensors().into_iter().zip(reference.tensors()) {
            if a.shape != b.shape || a.data.len() != b.data.len() {
                return Err(Error::invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    a.shape, b.shape
                )));
            }
        }
        if self.scalar_count() != count_parameters(&self.config) {
            return Err(Error::invalid("parameter count does not match config"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::new(2, 8, 2, 3, 2, 2, 2).unwrap()
    }

    #[test]
    fn shapes_match_count_formula() {
        let p: Parameters<f32> = Parameters::init(&cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.validate().unwrap();
        assert_eq!(p.scalar_count(), count_parameters(&cfg()));
    }

    #[test]
    fn names_are_sorted_and_unique() {
        let p: Parameters<f64> = Parameters::zeros(&cfg());
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(names, sorted);
        let names_mut: Vec<String> = p.clone().tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
    }

    #[test]
    fn init_zeroes_modulation_and_head() {
        let p: Parameters<f32> = Parameters::init(&cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(p.head_w.data.iter().all(|&x| x == 0.0));
        assert!(p.blocks.iter().all(|b| b.ada_w.data.iter().all(|&x| x == 0.0)));
        assert!(p.tok_emb.data.iter().all(|&x| x.abs() <= 0.04));
        assert!(p.tok_emb.data.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn sincos_rows_share_their_row_half() {
        let c = ModelConfig::new(1, 8, 2, 3, 3, 4, 1).unwrap();
        let t: Tensor<f64> = sincos_positions(&c);
        let row = |p: usize| &t.data[p * 8..(p + 1) * 8];
        // cell (1, 2) and (1, 3) agree on the row half, (0, 2) and (1, 2) on the column half
        assert_eq!(row(6)[..4], row(7)[..4]);
        assert_eq!(row(2)[4..], row(6)[4..]);
        assert_eq!(row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0][..]);
        assert!((row(5)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((row(5)[1] - (0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn norm_and_scale() {
        let mut p: Parameters<f64> = Parameters::zeros(&cfg());
        p.head_b.data = vec![3.0, 4.0, 0.0];
        assert!((p.global_norm() - 5.0).abs() < 1e-12);
        p.scale(2.0);
        assert!((p.global_norm() - 10.0).abs() < 1e-12);
    }
}

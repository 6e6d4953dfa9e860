use crate::error::{Error, Result};

/// Shape of the bidirectional transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Codebook size `V`; the token embedding has `V + 1` rows (row `V` is the mask).
    pub vocab: u32,
    pub height: usize,
    pub width: usize,
    /// Real classes; label `num_classes` is the null (unconditional) class.
    pub num_classes: usize,
    pub dropout: f64,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    pub fn new(
        layers: usize,
        hidden_dim: usize,
        heads: usize,
        vocab: u32,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let config = Self {
            layers,
            hidden_dim,
            heads,
            vocab,
            height,
            width,
            num_classes,
            dropout: 0.0,
            mlp_ratio: 4,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_dropout(mut self, dropout: f64) -> Result<Self> {
        self.dropout = dropout;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(Error::invalid("vocab must be >= 2"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }
}

/// Trainable scalar count implied by the tensor shapes of [`super::Parameters`].
pub fn count_parameters(config: &ModelConfig) -> usize {
    let d = config.hidden_dim;
    let v = config.vocab as usize;
    let f = config.mlp_dim();
    let embeddings = (v + 1) * d + config.positions() * d + (config.num_classes + 1) * d;
    let per_block = (d * 6 * d + 6 * d) // adaLN modulation
        + (d * 3 * d + 3 * d) // qkv
        + (d * d + d) // attention output
        + (d * f + f) // mlp in
        + (f * d + d); // mlp out
    let head = (d * 2 * d + 2 * d) + (d * v + v);
    embeddings + config.layers * per_block + head
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_preset_is_tens_of_millions() {
        // 16x16 tokens, a 16k codebook and 1000 classes
        let tiny = ModelConfig::new(6, 384, 6, 16_384, 16, 16, 1000).unwrap();
        let count = count_parameters(&tiny);
        assert!((10_000_000..100_000_000).contains(&count), "{count}");
    }

    #[test]
    fn zero_layers_is_embeddings_plus_head() {
        let c = ModelConfig::new(0, 8, 2, 3, 2, 2, 1).unwrap();
        let expect = 4 * 8 + 4 * 8 + 2 * 8 + (8 * 16 + 16) + (8 * 3 + 3);
        assert_eq!(count_parameters(&c), expect);
    }

    #[test]
    fn more_layers_more_parameters() {
        let a = ModelConfig::new(2, 64, 4, 16, 8, 8, 2).unwrap();
        let b = ModelConfig { layers: 4, ..a.clone() };
        assert!(count_parameters(&b) > count_parameters(&a));
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(ModelConfig::new(1, 10, 3, 4, 2, 2, 1).is_err());
        assert!(ModelConfig::new(1, 8, 2, 4, 2, 2, 1).unwrap().with_dropout(1.0).is_err());
    }
}

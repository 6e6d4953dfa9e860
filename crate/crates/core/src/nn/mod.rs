//! Bidirectional transformer with adaLN class conditioning and a hand-written
//! backward pass.

mod checkpoint;
mod config;
mod model;
mod ops;
mod params;

pub use checkpoint::{Checkpoint, MAGIC};
pub use config::{count_parameters, ModelConfig};
pub use model::{backward, forward, ForwardCache};
pub use ops::Real;
pub use params::{sincos_positions, BlockParams, Parameters, Tensor};

use crate::error::{Error, Result};
use crate::predictor::{Predictor, PredictorOutput};
use crate::token::TokenGrid;

/// Inference wrapper: dropout off, logits widened to f64.
#[derive(Debug, Clone)]
pub struct NeuralPredictor<T = f32> {
    pub params: Parameters<T>,
}

impl<T: Real> NeuralPredictor<T> {
    pub fn new(params: Parameters<T>) -> Self {
        Self { params }
    }
}

impl<T: Real> Predictor for NeuralPredictor<T> {
    fn predict(&self, grid: &TokenGrid, class_label: usize) -> Result<PredictorOutput> {
        let cfg = &self.params.config;
        if grid.height() != cfg.height || grid.width() != cfg.width || grid.vocab().size() != cfg.vocab {
            return Err(Error::invalid(format!(
                "grid {}x{} (V={}) does not match model {}x{} (V={})",
                grid.height(),
                grid.width(),
                grid.vocab().size(),
                cfg.height,
                cfg.width,
                cfg.vocab
            )));
        }
        let (logits, _) = forward(&self.params, grid.cells(), class_label, None)?;
        let wide = logits
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect();
        PredictorOutput::new(cfg.positions(), cfg.vocab as usize, wide)
    }

    fn null_class(&self) -> usize {
        self.params.config.null_class()
    }
}

//! Model hyperparameters.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dimensions of the tiny decoder-only transformer. Defaults are sized so
/// the whole pipeline trains on a CPU in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ff == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config(format!(
                "max_seq_len must be at least 2, got {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { d_model: 10, n_heads: 3, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_tiny_context() {
        let cfg = ModelConfig { max_seq_len: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}

//! Transformer parameter storage and initialization.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::seeding::rng_from;

/// One pre-layer-norm decoder block. Projection matrices are stored
/// row-major as [d_in, d_out] so the forward pass is `x @ W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

/// Full parameter set. The output projection is untied from the token
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl TransformerWeights {
    /// Seeded init: normal(0, 0.02) projections and embeddings, unit
    /// layer-norm gains, zero biases and output head bias.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let d = config.d_model;
        let std = 0.02;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gamma: Tensor::full(vec![d], 1.0),
                ln1_beta: Tensor::zeros(vec![d]),
                w_q: Tensor::randn(vec![d, d], std, &mut rng),
                b_q: Tensor::zeros(vec![d]),
                w_k: Tensor::randn(vec![d, d], std, &mut rng),
                b_k: Tensor::zeros(vec![d]),
                w_v: Tensor::randn(vec![d, d], std, &mut rng),
                b_v: Tensor::zeros(vec![d]),
                w_o: Tensor::randn(vec![d, d], std, &mut rng),
                b_o: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::full(vec![d], 1.0),
                ln2_beta: Tensor::zeros(vec![d]),
                w_ff1: Tensor::randn(vec![d, config.d_ff], std, &mut rng),
                b_ff1: Tensor::zeros(vec![config.d_ff]),
                w_ff2: Tensor::randn(vec![config.d_ff, d], std, &mut rng),
                b_ff2: Tensor::zeros(vec![d]),
            });
        }
        Ok(TransformerWeights {
            config,
            token_embedding: Tensor::randn(vec![config.vocab_size, d], std, &mut rng),
            position_embedding: Tensor::randn(vec![config.max_seq_len, d], std, &mut rng),
            layers,
            final_ln_gamma: Tensor::full(vec![d], 1.0),
            final_ln_beta: Tensor::zeros(vec![d]),
            w_out: Tensor::randn(vec![d, config.vocab_size], std, &mut rng),
            b_out: Tensor::zeros(vec![config.vocab_size]),
        })
    }

    /// Visit every parameter tensor in a fixed order.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(&'a Tensor)) {
        f(&self.token_embedding);
        f(&self.position_embedding);
        for layer in &self.layers {
            f(&layer.ln1_gamma);
            f(&layer.ln1_beta);
            f(&layer.w_q);
            f(&layer.b_q);
            f(&layer.w_k);
            f(&layer.b_k);
            f(&layer.w_v);
            f(&layer.b_v);
            f(&layer.w_o);
            f(&layer.b_o);
            f(&layer.ln2_gamma);
            f(&layer.ln2_beta);
            f(&layer.w_ff1);
            f(&layer.b_ff1);
            f(&layer.w_ff2);
            f(&layer.b_ff2);
        }
        f(&self.final_ln_gamma);
        f(&self.final_ln_beta);
        f(&self.w_out);
        f(&self.b_out);
    }

    /// Mutable variant of [`Self::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        f(&mut self.token_embedding);
        f(&mut self.position_embedding);
        for layer in &mut self.layers {
            f(&mut layer.ln1_gamma);
            f(&mut layer.ln1_beta);
            f(&mut layer.w_q);
            f(&mut layer.b_q);
            f(&mut layer.w_k);
            f(&mut layer.b_k);
            f(&mut layer.w_v);
            f(&mut layer.b_v);
            f(&mut layer.w_o);
            f(&mut layer.b_o);
            f(&mut layer.ln2_gamma);
            f(&mut layer.ln2_beta);
            f(&mut layer.w_ff1);
            f(&mut layer.b_ff1);
            f(&mut layer.w_ff2);
            f(&mut layer.b_ff2);
        }
        f(&mut self.final_ln_gamma);
        f(&mut self.final_ln_beta);
        f(&mut self.w_out);
        f(&mut self.b_out);
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.for_each_tensor_mut(|t| t.set_requires_grad(trainable));
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|t| n += t.numel());
        n
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut finite = true;
        self.for_each_tensor(|t| finite &= t.all_finite());
        if !finite {
            return Err(Error::Validation("non-finite model weight".into()));
        }
        Ok(())
    }

    /// Bitwise equality of all parameters, for frozen-base contracts.
    pub fn bit_identical(&self, other: &TransformerWeights) -> bool {
        if self.config != other.config {
            return false;
        }
        let mut mine = Vec::new();
        self.for_each_tensor(|t| mine.push(t));
        let mut theirs = Vec::new();
        other.for_each_tensor(|t| theirs.push(t));
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let a = TransformerWeights::init(ModelConfig::default(), 13).unwrap();
        let b = TransformerWeights::init(ModelConfig::default(), 13).unwrap();
        assert!(a.bit_identical(&b));
        let c = TransformerWeights::init(ModelConfig::default(), 14).unwrap();
        assert!(!a.bit_identical(&c));
    }

    #[test]
    fn param_count_matches_shapes() {
        let cfg = ModelConfig { vocab_size: 8, d_model: 4, n_heads: 2, n_layers: 1, d_ff: 6, max_seq_len: 16 };
        let w = TransformerWeights::init(cfg, 1).unwrap();
        let per_layer = 2 * 4 + 4 * (4 * 4 + 4) + 2 * 4 + (4 * 6 + 6) + (6 * 4 + 4);
        let expected = 8 * 4 + 16 * 4 + per_layer + 2 * 4 + 4 * 8 + 8;
        assert_eq!(w.param_count(), expected);
    }
}

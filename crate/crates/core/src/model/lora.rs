//! Low-rank adapters over attention query/value projections.
//!
//! Each adapted matrix W ([d_in, d_out] here) gets a trainable delta
//! (alpha/rank) · A·B with A: [d_in, rank] and B: [rank, d_out]. B starts at
//! zero, so a freshly attached adapter leaves the model bit-identical.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::TransformerWeights;
use crate::seeding::rng_from;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTarget {
    Query,
    Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub layer: usize,
    pub target: LoraTarget,
    /// Down projection [d_in, rank], normal(0, 0.02) init.
    pub a: Tensor,
    /// Up projection [rank, d_out], zero init.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub pairs: Vec<LoraPair>,
    /// Set once the delta has been folded into a weight copy; merging the
    /// same adapter twice would apply the delta additively again.
    pub merged: bool,
}

impl LoraAdapter {
    /// Adapter over every layer's Q and V projections. Pairs are trainable
    /// from the start; the base model stays frozen.
    pub fn init(config: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if alpha <= 0.0 {
            return Err(Error::Config("lora alpha must be positive".into()));
        }
        let mut rng = rng_from(seed);
        let d = config.d_model;
        let mut pairs = Vec::with_capacity(config.n_layers * 2);
        for layer in 0..config.n_layers {
            for target in [LoraTarget::Query, LoraTarget::Value] {
                pairs.push(LoraPair {
                    layer,
                    target,
                    a: Tensor::randn(vec![d, rank], 0.02, &mut rng).with_requires_grad(true),
                    b: Tensor::zeros(vec![rank, d]).with_requires_grad(true),
                });
            }
        }
        Ok(LoraAdapter { rank, alpha, pairs, merged: false })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate_against(&self, weights: &TransformerWeights) -> Result<()> {
        let d = weights.config.d_model;
        for pair in &self.pairs {
            if pair.layer >= weights.config.n_layers {
                return Err(Error::Shape(format!(
                    "adapter targets layer {} of a {}-layer model",
                    pair.layer, weights.config.n_layers
                )));
            }
            if pair.a.shape() != [d, self.rank] || pair.b.shape() != [self.rank, d] {
                return Err(Error::Shape(format!(
                    "adapter pair shapes {:?}/{:?} do not match d_model {d}, rank {}",
                    pair.a.shape(),
                    pair.b.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// The dense delta (alpha/rank)·A·B for one pair, shaped like the wrapped
    /// matrix.
    pub fn delta(&self, pair: &LoraPair) -> Vec<f64> {
        let d_in = pair.a.shape()[0];
        let r = self.rank;
        let d_out = pair.b.shape()[1];
        let s = self.scaling();
        let a = pair.a.data();
        let b = pair.b.data();
        let mut out = vec![0.0; d_in * d_out];
        for i in 0..d_in {
            for p in 0..r {
                let av = a[i * r + p] * s;
                for j in 0..d_out {
                    out[i * d_out + j] += av * b[p * d_out + j];
                }
            }
        }
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for pair in &mut self.pairs {
            pair.a.set_requires_grad(trainable);
            pair.b.set_requires_grad(trainable);
        }
    }

    /// Bitwise snapshot comparison, for no-op training contracts.
    pub fn bit_identical(&self, other: &LoraAdapter) -> bool {
        self.rank == other.rank
            && self.alpha == other.alpha
            && self.pairs.len() == other.pairs.len()
            && self.pairs.iter().zip(&other.pairs).all(|(x, y)| {
                x.layer == y.layer
                    && x.target == y.target
                    && x.a.data().iter().zip(y.a.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                    && x.b.data().iter().zip(y.b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

/// Fold the adapter delta into a copy of the base weights. Guarded by the
/// adapter's `merged` flag: a second merge of the same adapter errors instead
/// of silently doubling the delta.
pub fn merge_lora(weights: &TransformerWeights, adapter: &mut LoraAdapter) -> Result<TransformerWeights> {
    if adapter.merged {
        return Err(Error::Validation(
            "adapter already merged; merging again would apply the delta twice".into(),
        ));
    }
    adapter.validate_against(weights)?;
    let mut merged = weights.clone();
    for pair in &adapter.pairs {
        let delta = adapter.delta(pair);
        let w = match pair.target {
            LoraTarget::Query => &mut merged.layers[pair.layer].w_q,
            LoraTarget::Value => &mut merged.layers[pair.layer].w_v,
        };
        for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
            *wv += dv;
        }
    }
    adapter.merged = true;
    Ok(merged)
}

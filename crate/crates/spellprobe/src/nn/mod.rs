//! Minimal differentiable compute core: a pre-LN transformer stack with
//! hand-written reverse-mode gradients, Adam, gradient checking, and a
//! binary checkpoint format. Everything is f64 so the finite-difference
//! verification runs against the production code path.

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod stack;
pub mod store;

pub use adam::AdamState;
pub use batch::{PackedBatch, NO_TARGET, PREFIX_INPUT};
pub use gradcheck::grad_check;
pub use stack::{Stack, StackConfig};
pub use store::{ParamId, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the character probe (also reused, with different
/// dims, by the MLM harness).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    /// Batch size cap in positions, counting every example as its padded
    /// length (prefix + characters + EOS).
    pub max_batch_tokens: usize,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            layers: 6,
            d_model: 512,
            heads: 8,
            ffn_dim: 2048,
            dropout: 0.1,
            lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 1000,
            max_batch_tokens: 1024,
            max_decode_len: 32,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0
            || self.d_model == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.steps == 0
            || self.max_batch_tokens == 0
            || self.max_decode_len == 0
        {
            return Err(Error::Config("all counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

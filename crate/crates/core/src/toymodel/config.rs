// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::error::{Result, XcError};

fn default_true() -> bool {
    true
}

fn default_max_seq_len() -> usize {
    64
}

/// Shape and seed of a desk-scale model. For the encoder-decoder family
/// `n_layers` applies to both stacks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub tie_unembedding: bool,
    /// Apply a layer norm before the unembedding head.
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

impl ModelConfig {
    pub fn new(arch: Arch, n_layers: usize, d_model: usize, d_ff: usize, n_heads: usize, seed: u64) -> Self {
        Self {
            arch,
            n_layers,
            d_model,
            d_ff,
            n_heads,
            max_seq_len: default_max_seq_len(),
            seed,
            tie_unembedding: true,
            final_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(XcError::Config("n_layers must be at least 1".into()));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(XcError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(XcError::Config("d_ff and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

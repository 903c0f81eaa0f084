use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the network. `heads · head_dim` must equal `model_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width `C` of frame features and concept vectors.
    pub feature_dim: usize,
    /// Width `d` of tokens, queries and temporal embeddings.
    pub model_dim: usize,
    /// Kernel size of the tokenizer; the stride always equals it.
    pub conv_kernel: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Number of learnable moment queries `N`.
    pub num_queries: usize,
    /// Rows `T₀` of the temporal-embedding table.
    pub te_rows: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            model_dim: 64,
            conv_kernel: 7,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            head_dim: 16,
            num_queries: 16,
            te_rows: 64,
            ffn_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// Full-size layout: 7-wide tokenizer, 6 + 6 layers of 8 heads × 64, d = 512.
    pub fn full_scale(feature_dim: usize, num_queries: usize) -> Self {
        Self {
            feature_dim,
            model_dim: 512,
            conv_kernel: 7,
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            head_dim: 64,
            num_queries,
            te_rows: 64,
            ffn_hidden: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("conv_kernel", self.conv_kernel),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("num_queries", self.num_queries),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Config(format!(
                "heads·head_dim = {}·{} = {} differs from model_dim {}",
                self.heads,
                self.head_dim,
                self.heads * self.head_dim,
                self.model_dim
            )));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model_dim {} must be even for sinusoidal temporal embeddings",
                self.model_dim
            )));
        }
        if self.te_rows < 2 {
            return Err(Error::Config("te_rows must be at least 2".into()));
        }
        Ok(())
    }
}

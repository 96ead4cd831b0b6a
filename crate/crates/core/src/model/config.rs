use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gelu, LN_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub n_ctx: usize,
    #[serde(default = "default_eps")]
    pub ln_eps: f32,
    #[serde(default)]
    pub gelu: Gelu,
}

fn default_eps() -> f32 {
    LN_EPS
}

impl ModelConfig {
    /// GPT-2 Small: 12 layers of 12 heads over a 768-wide residual stream.
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            vocab: 50257,
            n_ctx: 1024,
            ln_eps: LN_EPS,
            gelu: Gelu::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_head {} x n_heads {} != d_model {}",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab == 0 || self.n_ctx == 0 || self.d_mlp == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
}

/// A residual channel pinned to a large constant by the embedding, the
/// "massive activation" seen in pretrained LLMs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassiveChannel {
    pub channel: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub activation: Activation,
    pub tied_head: bool,
    pub norm_eps: f64,
    pub rope_base: f64,
    pub max_seq: usize,
    #[serde(default)]
    pub massive: Option<MassiveChannel>,
}

impl Default for ModelConfig {
    /// The toy model: byte vocabulary, 2 blocks of width 64.
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            activation: Activation::Silu,
            tied_head: false,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            max_seq: 2048,
            massive: Some(MassiveChannel {
                channel: 0,
                value: 1000.0,
            }),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) || self.max_seq == 0 {
            return bad("norm_eps, rope_base and max_seq must be positive".into());
        }
        if let Some(m) = self.massive {
            if m.channel >= self.d_model || !m.value.is_finite() {
                return bad(format!("massive channel {} invalid", m.channel));
            }
            if self.tied_head {
                return bad("a massive channel needs an untied output head".into());
            }
        }
        Ok(())
    }
}

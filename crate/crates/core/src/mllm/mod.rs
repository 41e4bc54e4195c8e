//! Toy decoder-only multimodal transformer.
//!
//! Input assembly per position:
//! - token: `tok_emb[id]`
//! - visual: each tile's 64 feature rows plus its position embedding pass
//!   through a cross-attention adapter whose 64 latents are shared by all
//!   tiles
//! - query: `queries[slot]`
//!
//! Learned absolute position embeddings are added, then pre-norm causal
//! blocks run over the whole mixed sequence. LM logits come from `lm_head`
//! on the final hidden states; each query segment's 64 hidden states go
//! through an output cross-attention head to `[64 × d_v]`.
//!
//! Linear weights are `[out × in]`. A linear at `prefix` may carry a LoRA
//! pair `prefix.lora_a: [r × in]`, `prefix.lora_b: [out × r]`.

mod forward;
mod generate;
pub mod gradcheck;
mod params;

use serde::{Deserialize, Serialize};

pub use forward::{
    evaluate, forward_batch, forward_sequence, loss, loss_and_grad, sequence_loss, Bound, EvalMetrics, ForwardOutput,
    LossParts, LossVars,
};
pub use generate::{event_tokens, generate, Event};
pub use params::{ModelParams, CHECKPOINT_FORMAT};

use crate::codec::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::seqpack::QUERY_SLOTS;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub visual_dim: usize,
    pub n_queries: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            n_layers: 2,
            n_heads: 4,
            mlp_dim: 128,
            vocab_size: VOCAB_SIZE,
            visual_dim: 8,
            n_queries: QUERY_SLOTS,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model_dim == 0 || self.n_heads == 0 || self.n_layers == 0 || self.mlp_dim == 0 {
            return bad("model sizes must be positive".into());
        }
        if self.model_dim % self.n_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if self.n_queries != QUERY_SLOTS {
            return bad(format!("n_queries must be {QUERY_SLOTS}, got {}", self.n_queries));
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.visual_dim == 0 || self.max_len == 0 {
            return bad("visual_dim and max_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Linear maps inside the transformer blocks, the LoRA placement sites.
    pub fn block_linears(&self) -> Vec<String> {
        (0..self.n_layers)
            .flat_map(|i| {
                ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"].map(|l| format!("blocks.{i}.{l}"))
            })
            .collect()
    }
}

/// Trainable parameter groups for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Lora,
    InputAdapter,
    OutputHead,
    Posemb,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Lora,
        ParamGroup::InputAdapter,
        ParamGroup::OutputHead,
        ParamGroup::Posemb,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(ParamGroup::Lora),
            "input_adapter" => Ok(ParamGroup::InputAdapter),
            "output_head" => Ok(ParamGroup::OutputHead),
            "posemb" => Ok(ParamGroup::Posemb),
            other => Err(Error::Config(format!(
                "unknown parameter group {other:?} (expected lora, input_adapter, output_head, posemb)"
            ))),
        }
    }

    pub fn contains(self, name: &str) -> bool {
        match self {
            ParamGroup::Lora => name.ends_with(".lora_a") || name.ends_with(".lora_b"),
            ParamGroup::InputAdapter => name.starts_with("adapter."),
            ParamGroup::OutputHead => name.starts_with("head."),
            ParamGroup::Posemb => name.starts_with("posemb."),
        }
    }
}

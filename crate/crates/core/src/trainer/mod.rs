//! Optimisation: Adam, LoRA adapters, the pre-train and fine-tune loops,
//! checkpoints and metrics.

mod adam;
mod config;
mod lora;
mod run;

pub use adam::{cosine_lr, AdamConfig, AdamState, ParamStore};
pub use config::{TrainConfig, SEED_ENV};
pub use lora::{attach_lora, merge_lora, plain_forward, LoraAdapter, LoraLinear, LoraSpec};
pub use run::{
    finetune, load_model, load_tokenizer, pretrain, read_metrics, run_steps, trainable_predicate, write_metrics_header,
    MetricRow, Session, TrainOutcome,
};

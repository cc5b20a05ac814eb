//! Shared-KV decoder stack with layer-wise adaptation, decode caches and a
//! small benchmarking harness.

pub mod adapt;
pub mod error;
pub mod harness;
pub mod kv_cache;
pub mod model;
pub mod tensor;

pub use adapt::{final_finetune, full_stage_adapt, incremental_adapt, StageReport, TrainConfig};
pub use error::{CheckpointError, EchoError, Result};
pub use kv_cache::{decode_step, kv_memory_report, prefill, DecodeCaches, MemoryReport};
pub use model::{EchoModel, ModelConfig};
pub use tensor::{Parameter, Tape, Tensor};

//! Weak image-text supervision from open-access scholarly articles, LoRA
//! adaptation of frozen projection heads, and retrieval evaluation.

pub mod align;
pub mod discovery;
pub mod embedding;
pub mod eval;
pub mod extract;
pub mod io_util;
pub mod lora;
pub mod pipeline;
pub mod synthetic;

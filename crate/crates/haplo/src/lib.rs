//! Early-fusion multimodal transformer at desk scale.
//!
//! A single transformer processes a mixed image/text token sequence: a
//! lightweight patch embedding and a text projector map both modalities into
//! one latent space, a ViT-style pre-decoder fuses them under a mixed
//! causal/bidirectional attention mask, and a Llama-style post-decoder emits
//! next-token logits. Training happens in two stages: distillation
//! pre-training of the pre-decoder against a frozen vision teacher and the
//! frozen embedding matrix, then full next-token fine-tuning.
//!
//! Everything runs on the in-crate reverse-mode autodiff engine in
//! [`tensor`]; no external ML framework is involved.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod infer;
pub mod losses;
pub mod model;
pub mod optim;
pub mod seq;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor};

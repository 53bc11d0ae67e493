//! A small pre-norm transformer denoiser conditioned on a visual prefix.

pub mod cache;
pub mod checkpoint;
pub mod forward;
pub mod gradcheck;
pub mod mask;
pub mod optim;
pub mod params;
pub mod tensor;

pub use cache::KvCache;
pub use forward::{forward, loss_and_grad, loss_only, masked_log_probs, Conditioning, LossGrad};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mask::{build_attention_mask, AttentionMaskSpec, AttentionMode};
pub use optim::{Adam, AdamConfig};
pub use params::{init_parameters, ModelConfig, Parameters, Tensor};
pub use tensor::Real;

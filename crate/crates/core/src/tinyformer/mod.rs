//! Minimal decoder-only transformer over (x, y) tokens with a Gaussian
//! head, reverse-mode autodiff, two attention masks, and cached or
//! recomputing autoregressive inference.

pub mod checkpoint;
mod gradcheck;
mod infer;
pub mod kernels;
mod mask;
mod model;
mod tape;
mod tensor;
mod train;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_FLOOR};
pub use infer::{
    infer_multistep, predictive, step_attention_flops, KvCache, TinyGeneration, TransformerModel,
};
pub use mask::{build_mask, AttentionMask, MaskKind, MaskScheme, Phase};
pub use model::{
    forward, forward_batch, head_to_gaussian, nll_loss, SeqInput, Token, TransformerConfig,
    TransformerWeights,
};
pub use tape::{Segment, Tape, Var};
pub use tensor::{gemm, matmul, Tensor};
pub use train::{
    batch_loss, evaluate, evaluate_at_context, sample_gp_sequences, train, AdamW, CosineSchedule,
    EpochLog, Example, GpDataConfig, GpSequence, OptimizerConfig, TrainConfig, TrainingLog,
    DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE,
};

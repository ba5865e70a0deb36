//! Multi-stage time-domain target speaker extraction.
//!
//! Given a two-speaker mixture and a short reference utterance of the target
//! speaker, the model encodes both signals with a shared multi-scale
//! convolutional encoder, estimates per-scale masks with a dilated TCN
//! conditioned on speaker embeddings, decodes per-scale estimates, and fuses
//! them with learned weights. Stages are chained: each later stage re-derives
//! its speaker references from the previous stage's extracted signal, at both
//! utterance level and frame level.
//!
//! The crate also ships the synthetic corpus generator, the training loop,
//! and the evaluation metrics needed to exercise those mechanisms end to end.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod net;
pub mod nn;
pub mod pipeline;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
pub use net::ModelConfig;
pub use pipeline::{MultiStageModel, PipelineOutput, StageOptions, StageOutput};
pub use train::TrainConfig;
pub use signal::{
    fuse_signals, improvement, mix_at_snr, sdr, si_sdr, si_sdr_loss, si_sdr_loss_with_grad,
    FusionWeights, Improvement, SnrMix, Waveform,
};

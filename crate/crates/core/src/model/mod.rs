//! ViT-style encoder, synthetic data, training and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod train;

pub use config::{EncoderConfig, MoeConfig, RouterKind};
pub use data::{patchify, unpatchify, Dataset, SynthTask};
pub use encoder::{build_encoder, CapturedRouting, Encoder, EncoderOutput, Ffn, RouterStats};
pub use train::{evaluate, train, train_step, EvalMetrics, MetricsRow, Schedule, TrainHyper, TrainState};

//! Encoder forward pass, losses, optimisation and the training loop.

mod checkpoint;
mod config;
mod encoder;
mod loss;
mod metrics;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{TrainConfig, CONFIG_KEYS};
pub use encoder::{forward_encoder, EncoderOutput, ForwardOptions, GraphContext, EVAL_PASS};
pub use loss::{classification_loss, classify, contrastive_loss, logits, total_loss};
pub use metrics::{confusion, macro_f1, micro_f1};
pub use optim::{clip_grad_norm, global_norm, AdamState, AdamW, EarlyStopping, StopSignal};
pub use trainer::{
    infer, predict, split_nodes, train, working_sequence, EpochRecord, Prediction, RunReport, TrainOutcome,
};

//! Two-stage training: task-agnostic pre-training of the backbone θ and the
//! prior module, then task-specific fine-tuning with an auxiliary backbone φ
//! that supplies pseudo ground truth to the prior module.

mod checkpoint;
mod config;
mod infer;
mod session;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage, MAGIC, VERSION};
pub use config::{parse_config, FinetuneMode, TrainConfig};
pub use infer::{compare_pretrain_effect, pseudo_gt, restore_image, Comparison};
pub use session::{
    finetune, finetune_joint, finetune_stepwise, pretrain, pretrain_from, LogRecord, Session, TrainLog,
};

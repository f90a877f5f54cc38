//! ArcFace-supervised training at toy scale.

mod arcface;
mod config;
mod data;
pub mod gradcheck;
mod sgd;
mod train;

pub use arcface::{arcface_loss, ArcFaceGrads, ArcFaceHead, COS_CLAMP, DEFAULT_MARGIN, DEFAULT_SCALE};
pub use config::{lr_at, scale_drops, TrainConfig};
pub use data::{gen_toy_dataset, ToyDataset, ToyParams};
pub use gradcheck::{check_ops, check_setup, grad_check_model, GradCheckOptions, GradCheckReport, OpCheck};
pub use sgd::{decay_for, sgd_step, weight_decay_groups, Sgd};
pub use train::{toy_setup, train_loop, training_accuracy, LogRow, TrainLog};

//! The segmentation network: layout, forward pass, training and checkpoints.

mod arch;
mod check;
mod checkpoint;
mod net;
mod params;
mod train;

pub use arch::{ArchitectureSpec, BlockPlan, ShapePlan, Variant, BASELINE_POOLED_STAGES};
pub use check::grad_check_model;
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{forward_graph, forward_on, ForwardOptions, ForwardPass};
pub use params::{build_model, ModelParams, OUTPUT_GAIN};
pub use train::{
    assemble_batch, predict_ids, sample_losses, train, EpochRecord, TrainConfig, TrainHistory,
};

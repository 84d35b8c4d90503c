//! Mixture-side separator: cross-attention fusion, dual-path blocks, full model.

mod attention;
mod checkpoint;
mod config;
mod dual_path;
mod model;

pub use attention::{fuse, AttentionTrace, CrossAttention};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{CuePresence, CueSet, Fusion, ModelConfig, SeparatorConfig, VariantSpec};
pub use dual_path::{chunk_count, merge, padded_length, segment, DualPath};
pub use model::{CueBatch, ModelOutput, SelgModel};

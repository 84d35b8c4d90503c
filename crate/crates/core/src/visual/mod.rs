//! Visual cue streams and the encoders that turn them into frame embeddings.

mod encoders;
mod lip;
mod pose;

pub use encoders::{
    lip_tensor, pose_tensor, upsample_indices, upsample_tensor, upsample_to_rate, EmbeddingSequence,
    GestureEncoder, GestureEncoderConfig, LipEncoder, LipEncoderConfig, ResBlockSpec,
};
pub use lip::{LipSequence, LIP_MAGIC};
pub use pose::{joint, PoseFrame, PoseSequence, JOINT_NAMES, NUM_JOINTS, VISUAL_FPS};

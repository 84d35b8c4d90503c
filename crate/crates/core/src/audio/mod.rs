//! Time-domain audio and the learnable framed encoder/decoder pair.

mod codec;
mod waveform;

pub use codec::{
    frame_count, frame_tensor, overlap_add, overlap_add_tensor, CodecConfig, MixtureEmbedding, SpeechDecoder,
    SpeechEncoder,
};
pub(crate) use codec::fit_length;
pub use waveform::{Waveform, SAMPLE_RATE};

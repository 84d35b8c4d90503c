//! Synthetic audio-visual speakers and the mixture protocol built on them.

mod corpus;
mod mix;
mod synth;

pub use corpus::{
    build_corpus, derive_seed, generate_split, sample_id, simulate_sample, speaker_pool, write_sample, CorpusSummary,
    Manifest, ManifestEntry, SimConfig, Split, SplitCounts, MANIFEST_FILE,
};
pub use mix::{
    apply_missing, measured_snr, mix_at_snr, scale_to_snr, sum_sources, truncate_align, MissingPolicy, MixtureSample,
};
pub use synth::{
    correlation, envelope, envelope_per_frame, frame_span, lagged_envelope, render_mouth, synth_source, visual_frames,
    SourceClip, Speaker, SynthConfig,
};

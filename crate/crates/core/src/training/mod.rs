//! Optimisation: schedule, AdamW, gradient accumulation and the epoch loop.

mod data;
mod optim;
mod schedule;
mod trainer;

pub use data::{assemble, random_crop, secs_to_quantum, Batch, ManifestSource, SampleSource, CROP_QUANTUM, DEFAULT_LIP_SIZE};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use schedule::{LrSchedule, TrainConfig};
pub use trainer::{finetune_infonce, EpochRecord, LipTeacher, StepReport, TrainOutcome, Trainer};

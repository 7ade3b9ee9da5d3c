//! Alternating adversarial training, its optimizer, history buffer and
//! augmentation, and extension of a trained model by one style.

mod adam;
mod augment;
mod buffer;
mod config;
mod trainer;

pub use adam::{AdamSlot, AdamState};
pub use augment::{augment, augment_with, draw_plan, resize_bilinear, CropPlan};
pub use buffer::{BufferChoice, ReplayBuffer, BUFFER_CAPACITY};
pub use config::{Mode, ReconSource, TrainConfig};
pub use trainer::{
    incremental_add_style, sample_noise, seeded_stream, train, Batch, LossRecord, TrainOutcome, TrainState, TrainingData,
};

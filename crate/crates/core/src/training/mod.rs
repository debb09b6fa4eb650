//! Loss composition, optimization, checkpoints, configuration and datasets.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod pipeline;
pub mod schedule;
pub mod trainer;

pub use config::{ConfigError, DenoiserInput, LqaeConfig, Preset};
pub use data::{load_image_file, load_image_folder, save_image_png, synthetic_dataset, Dataset};
pub use pipeline::{total_loss, LossBreakdown, LossSettings, LqaeModel};
pub use schedule::{lr_schedule, LrSchedule};
pub use trainer::{fit, load_checkpoint, load_model, train_step, FitOptions, FitResult, MetricsRecord, TrainState};

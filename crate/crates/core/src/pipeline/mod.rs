//! Configuration, datasets, the training loop, checkpoints and evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod train;

pub use checkpoint::{Checkpoint, LogRow};
pub use config::{Lipschitz, TrainConfig};
pub use dataset::{batch_from_images, load_dataset, Batch, Dataset, Split};
pub use evaluate::{evaluate, evaluate_with, image_seed, Colorizer};
pub use train::{generator_loss, generator_terms, resume, train, LossModel, TrainState};

//! Single-image rain removal by layer decomposition.

pub mod datastore;
pub mod error;
pub mod image;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod rainsynth;
pub mod seed;
pub mod trainer;

pub use datastore::{DatasetKind, ImageSet, Manifest};
pub use error::{Error, Result};
pub use image::ImageTensor;
pub use metrics::{psnr, ssim, EvalReport, TimingRecord};
pub use network::{Model, NetworkConfig, Weights};
pub use objectives::{LossValue, LossWeights, Stage, StageObjective};
pub use rainsynth::{blend, BlendMode, RainParams, Triplet};
pub use trainer::{Checkpoint, TrainConfig, Trainer};

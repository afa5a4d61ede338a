//! x0-predicting trajectory diffusion: schedule, transformer denoiser,
//! training and DDIM sampling.

pub mod checkpoint;
pub mod denoiser;
pub mod layers;
pub mod params;
pub mod schedule;
pub mod train;

pub use denoiser::{Denoiser, DenoiserConfig, Normalizer};
pub use params::{Adam, Ema, ParamSet};
pub use schedule::NoiseSchedule;
pub use train::{Policy, TrainConfig, Trainer, TrainingSet};

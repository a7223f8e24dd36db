//! Block discrete denoising diffusion language models.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod acceptance;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod forward;
pub mod masks;
pub mod objectives;
pub mod perf;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use config::ExperimentConfig;
pub use data::{MarkovSource, TokenSequence, Vocabulary};
pub use denoiser::{Bd3Model, BlockDenoiser, DenoiserConfig, DenoisingModel};
pub use error::{Bd3Error, Result};
pub use rng::SplitRng;
pub use sampling::{generate, Generation, GenerationStats, SamplerConfig, WithinBlock};
pub use schedule::NoiseSchedule;

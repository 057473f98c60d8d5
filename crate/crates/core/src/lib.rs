//! Style-aligned batch image generation with a desk-scale next-scale
//! prediction model.
//!
//! A batch of prompts is generated in parallel through a coarse-to-fine
//! residual pyramid. Three training-free interventions pull every image
//! toward the batch's anchor image: early feature replacement, a single
//! pivotal feature interpolation, and scheduled injection of the anchor's
//! self-attention values. [`metrics`] and [`analysis`] measure the effect.

pub mod analysis;
pub mod backend;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod interventions;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod types;

pub use config::{
    validate_config, ConfigDocument, ConfigError, GenerationConfig, InterventionConfig,
    SamplingMode,
};
pub use engine::{generate, generate_pair, Generation, Generator, RunStats, StepSnapshot};
pub use error::{Error, Result};
pub use interventions::{ScheduleFunction, ScheduleKind};
pub use types::{FeatureMap, ImageBatch, PromptEmbedding, ResidualMap, Shape};

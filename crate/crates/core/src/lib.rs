//! Semi-supervised adversarial training for opinion-spam classification.
//!
//! A class-conditioned recurrent generator, a per-step discriminator and a
//! per-step classifier are trained together. The generator learns from
//! policy gradients rewarded by both critics; the classifier learns from
//! labeled reviews and from generated reviews labeled by their
//! conditioning class.

pub mod classifier;
pub mod config;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod rl;
pub mod synthetic;
pub mod trainer;

pub use classifier::{ClassifierParams, TieBreak};
pub use config::TrainConfig;
pub use corpus::{Class, DatasetBundle, Example, SplitSpec, TokenSequence, Vocabulary};
pub use discriminator::DiscriminatorParams;
pub use error::{Error, Result};
pub use eval::{evaluate, Evaluation, MetricsReport};
pub use generator::{ClassPrior, Context, GeneratorParams};
pub use trainer::{load_checkpoint, save_checkpoint, Checkpoint, RunState, TrainingData};

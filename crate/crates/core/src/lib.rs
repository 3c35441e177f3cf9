//! Audio- and text-conditioned motion generation at desk scale.

pub mod conditioning;
pub mod config;
pub mod datagen;
pub mod error;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod token2pose;
pub mod vq;

pub use config::RunConfig;
pub use datagen::{Corpus, Family, Sample, Split, StoredSample};
pub use error::{Error, Result};
pub use generator::{GeneratorModel, Sampling, Stage};
pub use metrics::EvalReport;
pub use motion::{MotionSequence, Pose3D, PoseSequence2D};
pub use numerics::{Checkpoint, Tensor};
pub use token2pose::{RelationBank, TargetSkeleton};
pub use vq::VqModel;

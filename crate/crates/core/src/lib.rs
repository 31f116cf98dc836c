//! Privacy-preserving manipulation of eye-tracking scanpath images.
//!
//! The pipeline turns raw gaze recordings into 3-channel images, trains a
//! convolutional autoencoder over them, and runs two opposing agents: a
//! reinforcement-learning manipulation agent that deactivates bottleneck
//! features so a protected attribute (subject identity) becomes
//! unclassifiable, and a classification agent that keeps retraining its
//! classifiers against the manipulated data. Differential-privacy and GAN
//! baselines are included for comparison.

pub mod analysis;
pub mod checkpoint;
pub mod class_agent;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod manip_agent;
pub mod models;
pub mod nn;
pub mod par;
pub mod privacy;
pub mod rng;

pub use analysis::{channel_importance, ChannelImportance};
pub use class_agent::{ClassifierMemory, Provenance, TaskClassifier};
pub use codec::{encode_scanpath, AugmentParams, EncodedImage, GazePoint, Scanpath};
pub use dataset::{DatasetSplit, LabeledRecord};
pub use error::CoreError;
pub use manip_agent::{ActionMask, ReplayEntry, ReplayMemory, RewardSpec};
pub use models::{
    AutoencoderModel, ClassifierModel, DqlModel, LossKind, TrainingSchedule,
};
pub use nn::Bottleneck;

//! Privacy baselines: epsilon-differential privacy and the supervised GAN.

pub mod dp;
pub mod gan;

pub use dp::{
    dp_evaluate, dp_image, dp_raw, l1_sensitivity_image, l1_sensitivity_raw, laplace_noise,
    select_optimal_epsilon, DpConfig, DpDomain, DpEvalItem, DpRawOutcome, EpsilonSweep,
    FrontierRow, Sensitivity,
};
pub use gan::{discriminator_score, gan_train, GanConfig, GanReport};

//! DP-SGD and its Rényi accountant.
//!
//! One training step Poisson-samples a lot, clips every per-example gradient
//! to joint L2 norm `C`, adds `N(0, σ²C²)` once to the sum, divides by the
//! expected lot size `qN`, and takes an optimizer step. The ledger composes the
//! subsampled-Gaussian RDP curve over steps and converts it to `(ε, δ)`.

pub mod accountant;
pub mod mechanism;
pub mod train;

pub use accountant::{
    calibrate_sigma, eps_from_ledger, rdp_subsampled_gaussian, PrivacyLedger, PrivacySpec,
    DEFAULT_ORDERS,
};
pub use mechanism::{clip, joint_norm, noisy_aggregate, poisson_sample};
pub use train::{
    dp_optimize, dp_train, train_base, write_loss_curve, AdapterObjective, BaseObjective,
    DpObjective, DpOutcome, LossPoint, OptimizerKind, Schedule, TrainExample,
};

use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum DpError {
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("input gradient has norm {norm} above the clip norm {clip}")]
    UnclippedInput { norm: f64, clip: f64 },
    #[error("sampling rate {0} is outside [0, 1]")]
    InvalidRate(f64),
    #[error("invalid privacy parameters: {0}")]
    InvalidSpec(String),
    #[error("no noise multiplier in [{lo}, {hi}] reaches epsilon {target}")]
    CalibrationOutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("privacy spec has neither a noise multiplier nor an epsilon target")]
    UnresolvedSpec,
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

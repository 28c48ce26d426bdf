//! Model-based recursions: a generic EKF, its latent-space use behind an
//! image encoder, and the process-noise grid search.

mod ekf;
mod latent;
mod tune;

pub use ekf::{
    covariance_update_joseph, covariance_update_standard, ekf_predict, ekf_update, EkfState, JacobianMode,
    Prediction, UpdateReport,
};
pub use latent::{latent_ekf_run, prior_fed_run, LatentEkfConfig, LatentEkfRun, LatentSource};
pub use tune::{default_q2_grid, tune_q2};

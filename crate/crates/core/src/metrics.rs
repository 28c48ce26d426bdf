//! Error metrics in decibels and the shared initial-estimate draw.

use serde::{Deserialize, Serialize};

use crate::data::{trajectory_rng, TrajectoryView};
use crate::ssm::{add_gaussian, Model, SsModelSpec};

/// Variance of the perturbation applied to `x_0` to obtain `x̂_0`.
pub const INIT_PERTURBATION_VAR: f64 = 0.1;

/// Which state coordinates enter the error and which of those are angles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSpec {
    pub coords: Vec<usize>,
    pub angular: Vec<usize>,
}

impl ErrorSpec {
    /// Pendulum: angle only, on the circle. Lorenz: the full state.
    pub fn for_model(spec: &SsModelSpec) -> Self {
        match spec.model {
            Model::Pendulum(_) => Self {
                coords: vec![0],
                angular: vec![0],
            },
            Model::Lorenz(_) => Self {
                coords: vec![0, 1, 2],
                angular: vec![],
            },
        }
    }

    /// Squared error of one estimate.
    pub fn sq_error(&self, est: &[f64], truth: &[f32]) -> f64 {
        self.coords
            .iter()
            .map(|&i| {
                let mut e = est[i] - truth[i] as f64;
                if self.angular.contains(&i) {
                    e = latentkf_autodiff::wrap_angle(e);
                }
                e * e
            })
            .sum()
    }

    /// Mean squared error of a `T × m` estimate sequence over `t ≥ 1`.
    pub fn trajectory_mse(&self, estimates: &[f64], tr: &TrajectoryView<'_>) -> f64 {
        let m = tr.m;
        let steps = (estimates.len() / m).min(tr.len());
        if steps < 2 {
            return 0.0;
        }
        (1..steps).map(|t| self.sq_error(&estimates[t * m..(t + 1) * m], tr.state(t))).sum::<f64>() / (steps - 1) as f64
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    /// `10·log10` of the mean MSE over trajectories.
    pub mse_db: f64,
    /// Sample standard deviation of the per-trajectory dB values.
    pub std_db: f64,
    pub per_trajectory_db: Vec<f64>,
}

pub fn summarize(per_trajectory_mse: &[f64]) -> MseSummary {
    let n = per_trajectory_mse.len();
    let mean = per_trajectory_mse.iter().sum::<f64>() / n.max(1) as f64;
    let dbs: Vec<f64> = per_trajectory_mse.iter().map(|&v| to_db(v)).collect();
    let std_db = if n > 1 {
        let mu = dbs.iter().sum::<f64>() / n as f64;
        (dbs.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MseSummary {
        mse_db: to_db(mean),
        std_db,
        per_trajectory_db: dbs,
    }
}

/// `x̂_0 = x_0 + N(0, 0.1·I)`, reproducible per `(seed, d)`.
pub fn initial_estimate(x0: &[f32], seed: u64, d: usize) -> Vec<f64> {
    let mut rng = trajectory_rng(seed ^ 0x1e57_0000, d);
    let mut x: Vec<f64> = x0.iter().map(|&v| v as f64).collect();
    add_gaussian(&mut x, INIT_PERTURBATION_VAR, &mut rng);
    x
}

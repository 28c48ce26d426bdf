//! Per-step inference time of the learned-gain pipeline against the
//! latent EKF, measured interleaved on one core.

use std::hint::black_box;
use std::time::Instant;

use latentkf::data::Dataset;
use latentkf::encoder::Encoder;
use latentkf::filters::{latent_ekf_run, JacobianMode};
use latentkf::metrics::initial_estimate;
use latentkf::pipeline::{LatentKalmanNet, EVAL_INIT_SEED};
use latentkf::ssm::{Dynamics, Model, SelectionMatrix};
use serde::{Deserialize, Serialize};

use crate::runner::{ekf_op_count, model_op_count, EkfFit};

/// Central-difference step of the numerical-Jacobian configuration.
pub const NUMERICAL_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub method: String,
    pub us_per_step: f64,
    pub ms_per_trajectory: f64,
    pub param_count: usize,
    pub op_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub trajectories: usize,
    pub steps_per_trajectory: usize,
    pub pinned: bool,
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn row(&self, method: &str) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const LATENT_KALMANNET: &str = "latent-kalmannet";
pub const EKF_NUMERICAL: &str = "latent-ekf-numerical-jacobian";
pub const EKF_ANALYTIC: &str = "latent-ekf-analytic-jacobian";

/// Restrict the calling thread to the core it is running on.
pub fn pin_current_thread() -> bool {
    let Some(ids) = core_affinity::get_core_ids() else {
        return false;
    };
    match ids.first() {
        Some(&id) => core_affinity::set_for_current(id),
        None => false,
    }
}

/// Time every method on every test trajectory. Methods take turns going
/// first so that cache and frequency effects average out; one untimed pass
/// over the first trajectory warms everything up.
pub fn measure(
    net: &LatentKalmanNet<f32>,
    ekf_encoder: &Encoder<f32>,
    fit: &EkfFit,
    model: &Model,
    selection: &SelectionMatrix,
    test: &Dataset,
) -> anyhow::Result<LatencyReport> {
    anyhow::ensure!(test.count() > 0 && test.len_t() >= 2, "latency needs trajectories with at least two steps");
    let pinned = pin_current_thread();
    let n = test.manifest.n;
    let p = selection.p();
    let numerical = fit.config(p, JacobianMode::Numerical { step: NUMERICAL_STEP });
    let analytic = fit.config(p, JacobianMode::Analytic);
    let run = |k: usize, frames: &[f32], x0: &[f64]| -> anyhow::Result<()> {
        match k {
            0 => {
                black_box(net.infer_trajectory(frames, x0)?);
            }
            1 => {
                black_box(latent_ekf_run(model, ekf_encoder, frames, n, selection, x0, &numerical)?);
            }
            _ => {
                black_box(latent_ekf_run(model, ekf_encoder, frames, n, selection, x0, &analytic)?);
            }
        }
        Ok(())
    };
    let first = test.trajectory(0);
    let x0 = initial_estimate(first.state(0), EVAL_INIT_SEED, 0);
    for k in 0..3 {
        run(k, first.frames, &x0)?;
    }
    let mut totals = [0.0f64; 3];
    for d in 0..test.count() {
        let tr = test.trajectory(d);
        let x0 = initial_estimate(tr.state(0), EVAL_INIT_SEED, d);
        for i in 0..3 {
            let k = (d + i) % 3;
            let t0 = Instant::now();
            run(k, tr.frames, &x0)?;
            totals[k] += t0.elapsed().as_secs_f64();
        }
    }
    let steps = test.len_t() - 1;
    let total_steps = (test.count() * steps) as f64;
    let enc_ops = ekf_encoder.arch.op_count()?;
    let m = Dynamics::dim(model);
    let row = |method: &str, total: f64, params: usize, ops: usize| LatencyRow {
        method: method.to_string(),
        us_per_step: 1e6 * total / total_steps,
        ms_per_trajectory: 1e3 * total / test.count() as f64,
        param_count: params,
        op_count: ops,
    };
    Ok(LatencyReport {
        trajectories: test.count(),
        steps_per_trajectory: steps,
        pinned,
        rows: vec![
            row(
                LATENT_KALMANNET,
                totals[0],
                net.encoder.param_count() + net.gain.param_count(),
                net.encoder.arch.op_count()? + net.gain.arch.op_count() + model_op_count(model) + 2 * m * p,
            ),
            row(
                EKF_NUMERICAL,
                totals[1],
                ekf_encoder.param_count(),
                enc_ops + ekf_op_count(model, p, JacobianMode::Numerical { step: NUMERICAL_STEP }),
            ),
            row(
                EKF_ANALYTIC,
                totals[2],
                ekf_encoder.param_count(),
                enc_ops + ekf_op_count(model, p, JacobianMode::Analytic),
            ),
        ],
    })
}

pub fn format_report(r: &LatencyReport) -> String {
    let mut s = format!(
        "{} trajectories x {} steps, {}\n{:<32} {:>12} {:>14} {:>8} {:>10}\n",
        r.trajectories,
        r.steps_per_trajectory,
        if r.pinned { "pinned to one core" } else { "not pinned" },
        "method",
        "us/step",
        "ms/trajectory",
        "params",
        "ops/step"
    );
    for row in &r.rows {
        s.push_str(&format!(
            "{:<32} {:>12.2} {:>14.3} {:>8} {:>10}\n",
            row.method, row.us_per_step, row.ms_per_trajectory, row.param_count, row.op_count
        ));
    }
    s
}

//! Training and evaluation of the four variants for one experiment cell.

use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use latentkf::data::{generate_dataset, generate_decimated, Dataset};
use latentkf::encoder::{train_encoder, validation_residuals, Encoder};
use latentkf::filters::{default_q2_grid, latent_ekf_run, prior_fed_run, tune_q2, JacobianMode, LatentEkfConfig};
use latentkf::metrics::{initial_estimate, summarize, ErrorSpec, MseSummary, INIT_PERTURBATION_VAR};
use latentkf::pipeline::{default_prior_sigma, train, LatentKalmanNet, TrainLog, EVAL_INIT_SEED};
use latentkf::ssm::{Dynamics, Model};
use latentkf_autodiff::ExecMode;
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::config::{ExperimentConfig, Variant};
use crate::report::MetricRecord;

/// Training dataset (`test = false`) or the separately drawn test set.
pub fn generate_data(cfg: &ExperimentConfig, test: bool, exec: ExecMode) -> anyhow::Result<Dataset> {
    let spec = cfg.data_spec();
    let (count, t, seed) = if test {
        (cfg.scale.test_count, cfg.t_test, cfg.test_seed())
    } else {
        (cfg.scale.count, cfg.t_train, cfg.seed)
    };
    let law = cfg.x0_law();
    let ds = match cfg.decimation() {
        Some(r) => generate_decimated(&spec, count, t, &law, seed, spec.model.dt() / r as f64, r, exec)?,
        None => generate_dataset(&spec, count, t, &law, seed, exec)?,
    };
    Ok(ds)
}

/// Encoder + EKF settings fitted on the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EkfFit {
    pub q2: f64,
    pub r: Vec<f64>,
}

impl EkfFit {
    pub fn config(&self, p: usize, jacobian: JacobianMode) -> LatentEkfConfig {
        LatentEkfConfig {
            q2: self.q2,
            r: nalgebra::DMatrix::from_row_slice(p, p, &self.r),
            sigma0: INIT_PERTURBATION_VAR,
            jacobian,
        }
    }
}

/// Everything the requested variants need, plus per-variant failures.
#[derive(Default)]
pub struct Trained {
    pub encoder: Option<Encoder<f32>>,
    pub prior_encoder: Option<Encoder<f32>>,
    pub ekf: Option<EkfFit>,
    pub pipeline: Option<LatentKalmanNet<f32>>,
    pub train_log: Option<TrainLog>,
    pub failures: Vec<(Variant, String)>,
}

impl Trained {
    pub fn failure(&self, v: Variant) -> Option<&str> {
        self.failures.iter().find(|(w, _)| *w == v).map(|(_, m)| m.as_str())
    }
}

fn load_encoder(dir: &Path) -> anyhow::Result<Encoder<f32>> {
    Ok(Encoder::load(dir)?)
}

fn save_encoder(enc: &Encoder<f32>, dir: &Path) -> anyhow::Result<()> {
    Ok(enc.save(dir)?)
}

fn cached_encoder(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    cache: &Cache,
    with_prior: bool,
) -> anyhow::Result<Encoder<f32>> {
    let kind = if with_prior { "encoder-prior" } else { "encoder" };
    cache.get_or_build(
        kind,
        &cfg.encoder_key(with_prior),
        load_encoder,
        || {
            log::info!("training {kind} (seed {})", cfg.seed);
            let t = Instant::now();
            let out = train_encoder(ds, &cfg.data_spec(), &cfg.encoder_config(with_prior))?;
            log::info!("{kind} trained in {:.1} s", t.elapsed().as_secs_f64());
            Ok(out.encoder)
        },
        save_encoder,
    )
}

fn cached_pipeline(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    cache: &Cache,
    warm: &Encoder<f32>,
    exec: ExecMode,
) -> anyhow::Result<(LatentKalmanNet<f32>, Option<TrainLog>)> {
    cache.get_or_build(
        "pipeline",
        &cfg.pipeline_key(),
        |dir| Ok(LatentKalmanNet::load(dir)?),
        || {
            log::info!("training latent-kalmannet (seed {})", cfg.seed);
            let t = Instant::now();
            let out = train(ds, &cfg.data_spec(), cfg.filter_model(), &cfg.schedule(exec), Some(warm.clone()))?;
            log::info!("latent-kalmannet trained in {:.1} s", t.elapsed().as_secs_f64());
            Ok((out.net, Some(out.log)))
        },
        |(net, log), dir| Ok(net.save(dir, log.as_ref())?),
    )
}

/// Validation-split fit of `R` (encoder residual covariance) and `q²`
/// (grid search) for the prior-fed encoder followed by an EKF.
pub fn fit_ekf(cfg: &ExperimentConfig, ds: &Dataset, enc: &Encoder<f32>) -> anyhow::Result<EkfFit> {
    let spec = cfg.data_spec();
    let (_, r) = validation_residuals(enc, ds, &spec, Some(default_prior_sigma(&spec)), cfg.seed)?;
    let model = cfg.filter_model();
    let err = ErrorSpec::for_model(&spec);
    let val: Vec<usize> = ds.splits().validation.collect();
    let n = ds.manifest.n;
    let sel = &spec.selection;
    let r_flat: Vec<f64> = r.transpose().iter().copied().collect();
    let q2 = tune_q2(&default_q2_grid(), |q2| {
        let fit = EkfFit { q2, r: r_flat.clone() };
        let c = fit.config(sel.p(), JacobianMode::Analytic);
        let mut total = 0.0;
        for &d in &val {
            let tr = ds.trajectory(d);
            let x0 = initial_estimate(tr.state(0), EVAL_INIT_SEED, d);
            match latent_ekf_run(&model, enc, tr.frames, n, sel, &x0, &c) {
                Ok(run) => total += err.trajectory_mse(&run.estimates, &tr),
                Err(e) => {
                    log::debug!("q² = {q2:e} failed on validation trajectory {d}: {e}");
                    return Ok(f64::INFINITY);
                }
            }
        }
        Ok(total / val.len().max(1) as f64)
    })?;
    log::info!("EKF fit: q² = {q2:e}, R = {r_flat:?}");
    Ok(EkfFit { q2, r: r_flat })
}

/// Train (or load from `cache`) whatever `variants` need. Failures are
/// recorded per variant; the function itself only fails on I/O-level
/// problems with the data.
pub fn train_variants(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    variants: &[Variant],
    cache: &Cache,
    exec: ExecMode,
) -> Trained {
    let mut out = Trained::default();
    if variants.contains(&Variant::Encoder) {
        match cached_encoder(cfg, ds, cache, false) {
            Ok(e) => out.encoder = Some(e),
            Err(e) => out.failures.push((Variant::Encoder, format!("{e:#}"))),
        }
    }
    let prior_variants: Vec<Variant> = variants.iter().copied().filter(|v| v.needs_prior_encoder()).collect();
    if prior_variants.is_empty() {
        return out;
    }
    let enc = match cached_encoder(cfg, ds, cache, true) {
        Ok(e) => e,
        Err(e) => {
            let msg = format!("{e:#}");
            out.failures.extend(prior_variants.iter().map(|&v| (v, msg.clone())));
            return out;
        }
    };
    if variants.contains(&Variant::EncoderPriorEkf) {
        match fit_ekf(cfg, ds, &enc) {
            Ok(f) => out.ekf = Some(f),
            Err(e) => out.failures.push((Variant::EncoderPriorEkf, format!("{e:#}"))),
        }
    }
    if variants.contains(&Variant::LatentKalmanNet) {
        match cached_pipeline(cfg, ds, cache, &enc, exec) {
            Ok((net, log)) => {
                out.pipeline = Some(net);
                out.train_log = log;
            }
            Err(e) => {
                log::error!("latent-kalmannet training failed: {e:#}");
                out.failures.push((Variant::LatentKalmanNet, format!("{e:#}")));
            }
        }
    }
    out.prior_encoder = Some(enc);
    out
}

/// Rough multiply-add count of one noise-free step of `f`.
pub fn model_op_count(model: &Model) -> usize {
    match model {
        Model::Pendulum(_) => 12,
        // J matrix products and one matrix-vector product, all 3×3
        Model::Lorenz(c) => 2 * (c.j * 27 + 9),
    }
}

/// Per-step operation count of an EKF with an `m`-dimensional state and
/// `p` latent coordinates; the numerical Jacobian adds `2m` evaluations of
/// `f`.
pub fn ekf_op_count(model: &Model, p: usize, jacobian: JacobianMode) -> usize {
    let m = model.dim();
    let f = model_op_count(model);
    let jac = match jacobian {
        JacobianMode::Analytic => f,
        JacobianMode::Numerical { .. } => 2 * m * f + 2 * m * m,
    };
    let cov_predict = 2 * 2 * m * m * m;
    let gain = 2 * (m * m * p + m * p * p) + p * p * p;
    let joseph = 2 * (2 * m * m * m + m * m * p + m * p * p);
    f + jac + cov_predict + gain + joseph + 2 * m * p
}

/// Test-set outcome of one variant.
#[derive(Clone, Debug)]
pub struct VariantEval {
    pub variant: Variant,
    pub per_trajectory_mse: Vec<f64>,
    pub summary: MseSummary,
    pub latency_us_per_step: f64,
    pub param_count: usize,
    pub op_count: usize,
    /// Largest gain-network hidden-state norm seen (Latent-KalmanNet only).
    pub max_hidden_norm: Option<f64>,
}

impl VariantEval {
    pub fn record(&self, cfg: &ExperimentConfig) -> MetricRecord {
        MetricRecord {
            variant: self.variant,
            noise_level: cfg.noise_level,
            mse_db: self.summary.mse_db,
            std_db: self.summary.std_db,
            latency_us_per_step: self.latency_us_per_step,
            param_count: self.param_count,
            op_count: self.op_count,
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
        }
    }
}

fn missing(v: Variant) -> anyhow::Error {
    anyhow::anyhow!("{v} was not trained")
}

/// Estimates of one variant on one trajectory, `T × m` with row 0 = `x̂_0`.
/// `hidden` receives the largest gain-network hidden norm when relevant.
pub fn estimate(
    cfg: &ExperimentConfig,
    trained: &Trained,
    variant: Variant,
    frames: &[f32],
    frame_len: usize,
    x0: &[f64],
    hidden: &mut f64,
) -> anyhow::Result<Vec<f64>> {
    let model = cfg.filter_model();
    let sel = &cfg.data_spec().selection;
    Ok(match variant {
        Variant::Encoder => {
            let enc = trained.encoder.as_ref().ok_or_else(|| missing(variant))?;
            prior_fed_run(&model, enc, frames, frame_len, sel, x0)?
        }
        Variant::EncoderPrior => {
            let enc = trained.prior_encoder.as_ref().ok_or_else(|| missing(variant))?;
            prior_fed_run(&model, enc, frames, frame_len, sel, x0)?
        }
        Variant::EncoderPriorEkf => {
            let enc = trained.prior_encoder.as_ref().ok_or_else(|| missing(variant))?;
            let fit = trained.ekf.as_ref().ok_or_else(|| missing(variant))?;
            let c = fit.config(sel.p(), JacobianMode::Analytic);
            latent_ekf_run(&model, enc, frames, frame_len, sel, x0, &c)?.estimates
        }
        Variant::LatentKalmanNet => {
            let net = trained.pipeline.as_ref().ok_or_else(|| missing(variant))?;
            let mut st = net.start(x0);
            let mut out = Vec::with_capacity(frames.len() / frame_len * x0.len());
            out.extend_from_slice(x0);
            for frame in frames.chunks_exact(frame_len).skip(1) {
                let x = net.infer_step(&mut st, frame)?;
                out.extend_from_slice(x);
                *hidden = hidden.max(st.hidden_norm());
            }
            out
        }
    })
}

/// Sequential, single-threaded evaluation of `variant` on every test
/// trajectory; also yields the mean wall-clock time per step.
pub fn evaluate_variant(
    cfg: &ExperimentConfig,
    trained: &Trained,
    variant: Variant,
    test: &Dataset,
) -> anyhow::Result<VariantEval> {
    if let Some(msg) = trained.failure(variant) {
        anyhow::bail!("{variant} failed during training: {msg}");
    }
    let spec = cfg.data_spec();
    let err = ErrorSpec::for_model(&spec);
    let n = test.manifest.n;
    let mut per_traj = Vec::with_capacity(test.count());
    let mut elapsed = 0.0;
    let mut steps = 0usize;
    let mut hidden = 0.0f64;
    for d in 0..test.count() {
        let tr = test.trajectory(d);
        let x0 = initial_estimate(tr.state(0), EVAL_INIT_SEED, d);
        let t0 = Instant::now();
        let est = estimate(cfg, trained, variant, tr.frames, n, &x0, &mut hidden)
            .with_context(|| format!("{variant} on test trajectory {d}"))?;
        elapsed += t0.elapsed().as_secs_f64();
        steps += tr.len() - 1;
        per_traj.push(err.trajectory_mse(&est, &tr));
    }
    let model = cfg.filter_model();
    let p = spec.p();
    let (param_count, op_count) = match variant {
        Variant::Encoder => {
            let e = trained.encoder.as_ref().ok_or_else(|| missing(variant))?;
            (e.param_count(), e.arch.op_count()? + model_op_count(&model))
        }
        Variant::EncoderPrior => {
            let e = trained.prior_encoder.as_ref().ok_or_else(|| missing(variant))?;
            (e.param_count(), e.arch.op_count()? + model_op_count(&model))
        }
        Variant::EncoderPriorEkf => {
            let e = trained.prior_encoder.as_ref().ok_or_else(|| missing(variant))?;
            (
                e.param_count(),
                e.arch.op_count()? + ekf_op_count(&model, p, JacobianMode::Analytic),
            )
        }
        Variant::LatentKalmanNet => {
            let net = trained.pipeline.as_ref().ok_or_else(|| missing(variant))?;
            (
                net.encoder.param_count() + net.gain.param_count(),
                net.encoder.arch.op_count()? + net.gain.arch.op_count() + model_op_count(&model) + 2 * model.dim() * p,
            )
        }
    };
    Ok(VariantEval {
        variant,
        summary: summarize(&per_traj),
        per_trajectory_mse: per_traj,
        latency_us_per_step: 1e6 * elapsed / steps.max(1) as f64,
        param_count,
        op_count,
        max_hidden_norm: (variant == Variant::LatentKalmanNet).then_some(hidden),
    })
}

/// Train and evaluate `variants` for one configuration. Variants that fail
/// are reported with NaN metrics; the rest of the cell still runs.
pub fn run_cell(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    cache: &Cache,
    exec: ExecMode,
) -> anyhow::Result<(Vec<MetricRecord>, Vec<Option<VariantEval>>, Trained)> {
    cfg.validate()?;
    let ds = generate_data(cfg, false, exec).context("generating training data")?;
    let trained = train_variants(cfg, &ds, variants, cache, exec);
    drop(ds);
    let test = generate_data(cfg, true, exec).context("generating test data")?;
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for &v in variants {
        match evaluate_variant(cfg, &trained, v, &test) {
            Ok(e) => {
                log::info!(
                    "{v} level {} seed {}: {:.3} dB (std {:.3})",
                    cfg.noise_level,
                    cfg.seed,
                    e.summary.mse_db,
                    e.summary.std_db
                );
                rows.push(e.record(cfg));
                evals.push(Some(e));
            }
            Err(e) => {
                log::error!("{e:#}");
                rows.push(MetricRecord {
                    variant: v,
                    noise_level: cfg.noise_level,
                    mse_db: f64::NAN,
                    std_db: f64::NAN,
                    latency_us_per_step: f64::NAN,
                    param_count: 0,
                    op_count: 0,
                    seed: cfg.seed,
                    config_hash: cfg.config_hash(),
                });
                evals.push(None);
            }
        }
    }
    Ok((rows, evals, trained))
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentkf::ssm::{LorenzConfig, Pendulum};

    #[test]
    fn numerical_jacobian_costs_more_operations() {
        for model in [Model::Pendulum(Pendulum::default()), Model::Lorenz(LorenzConfig::default())] {
            let p = 1;
            let a = ekf_op_count(&model, p, JacobianMode::Analytic);
            let n = ekf_op_count(&model, p, JacobianMode::Numerical { step: 1e-6 });
            assert!(n > a);
        }
    }
}

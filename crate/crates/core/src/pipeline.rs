//! Latent filtering with a learned gain.
//!
//! Per step the state is predicted through the (possibly mismatched) model,
//! the prior-fed encoder maps the frame to `z_t`, the gain network emits
//! `K_t` and the estimate becomes `x̂_{t|t−1} + K_t·(z_t − P·x̂_{t|t−1})`.
//! Training warm-starts the encoder on noisy ground-truth priors, then
//! alternates a gain-network pass (encoder frozen) and an encoder pass
//! (gain network frozen) over the same batches each epoch, with the loss
//! taken through full closed-loop rollouts.

use std::marker::PhantomData;
use std::path::Path;
use std::sync::Arc;

use latentkf_autodiff::{
    clip_grad_norm, BatchStats, Binding, ExecMode, Graph, LrSchedule, Optimizer, OptimizerConfig, Real, RowFunction,
    Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{train_encoder, BnMode, Encoder, EncoderEpoch, EncoderTrainConfig};
use crate::error::{storage, Error, Result};
use crate::gainnet::{GainNet, GainNetArch, GainRuntime, HiddenVars, StepInputs};
use crate::metrics::{initial_estimate, ErrorSpec};
use crate::ssm::{wrap_residual, Dynamics, Model, SelectionMatrix, SsModelSpec};

/// Seed of the `x̂_0` draws used for validation and testing.
pub const EVAL_INIT_SEED: u64 = 0x7e57;

/// The model's state transition as a differentiable row map.
pub struct ModelRow<T> {
    model: Model,
    _t: PhantomData<fn() -> T>,
}

impl<T> ModelRow<T> {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            _t: PhantomData,
        }
    }
}

const MAX_DIM: usize = 8;

impl<T: Real> RowFunction<T> for ModelRow<T> {
    fn dim_in(&self) -> usize {
        self.model.dim()
    }

    fn dim_out(&self) -> usize {
        self.model.dim()
    }

    fn eval(&self, x: &[T], out: &mut [T]) {
        let m = x.len();
        let mut a = [0.0; MAX_DIM];
        let mut b = [0.0; MAX_DIM];
        for i in 0..m {
            a[i] = x[i].to_f64().unwrap_or(f64::NAN);
        }
        self.model.evolve(&a[..m], &mut b[..m]);
        for i in 0..m {
            out[i] = T::lit(b[i]);
        }
    }

    fn jacobian(&self, x: &[T], jac: &mut [T]) {
        let m = x.len();
        let mut a = [0.0; MAX_DIM];
        let mut j = [0.0; MAX_DIM * MAX_DIM];
        for i in 0..m {
            a[i] = x[i].to_f64().unwrap_or(f64::NAN);
        }
        self.model.jacobian(&a[..m], &mut j[..m * m]);
        for i in 0..m * m {
            jac[i] = T::lit(j[i]);
        }
    }
}

pub struct LatentKalmanNet<T: Real> {
    /// Dynamics the filter assumes.
    pub model: Model,
    pub selection: SelectionMatrix,
    pub encoder: Encoder<T>,
    pub gain: GainNet<T>,
}

impl<T: Real> Clone for LatentKalmanNet<T> {
    fn clone(&self) -> Self {
        Self {
            model: self.model,
            selection: self.selection.clone(),
            encoder: self.encoder.clone(),
            gain: self.gain.clone(),
        }
    }
}

/// Graph values produced by a rollout.
pub struct Rollout<T> {
    /// `x̂_1 … x̂_{T−1}`, each `[B, m]`.
    pub estimates: Vec<Var>,
    /// Batch-norm statistics per step (batch mode only).
    pub bn_stats: Vec<Vec<BatchStats<T>>>,
    pub hidden: HiddenVars,
}

impl<T: Real> LatentKalmanNet<T> {
    pub fn new(model: Model, selection: SelectionMatrix, encoder: Encoder<T>, gain: GainNet<T>) -> Result<Self> {
        let m = model.dim();
        let p = selection.p();
        let prior_m = encoder.arch.prior.as_ref().map(|b| b.m);
        if selection.m() != m || encoder.arch.out_dim != p || prior_m != Some(m) || gain.arch.m != m || gain.arch.p != p
        {
            return Err(Error::Config(format!(
                "pipeline parts disagree: model m={m}, selection {}×{}, encoder out {} prior {:?}, gain {}×{}",
                p,
                selection.m(),
                encoder.arch.out_dim,
                prior_m,
                gain.arch.m,
                gain.arch.p
            )));
        }
        Ok(Self {
            model,
            selection,
            encoder,
            gain,
        })
    }

    /// Closed-loop rollout over `frames` (one `[B, 1, H, W]` tensor per step
    /// `t ≥ 1`, already scaled) from `x0: [B, m]`. With a window, state and
    /// hidden values are cut from the graph every `window` steps.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout(
        &self,
        g: &mut Graph<T>,
        be: &Binding,
        bg: &Binding,
        frames: &[Tensor<T>],
        x0: Var,
        bn: BnMode,
        window: Option<usize>,
    ) -> Result<Rollout<T>> {
        let batch = g.shape(x0)[0];
        let sel = self.selection.indices();
        let row: Arc<dyn RowFunction<T>> = Arc::new(ModelRow::<T>::new(self.model));
        let mut x_prev = x0;
        let mut prior_prev = x0;
        let mut z_prev = g.select_cols(x0, sel)?;
        let mut hidden = self.gain.initial_hidden(g, batch);
        let mut estimates = Vec::with_capacity(frames.len());
        let mut bn_stats = Vec::new();
        for (k, frame) in frames.iter().enumerate() {
            if let Some(w) = window {
                if k > 0 && k % w == 0 {
                    x_prev = g.detach(x_prev);
                    prior_prev = g.detach(prior_prev);
                    z_prev = g.detach(z_prev);
                    hidden = HiddenVars {
                        q: g.detach(hidden.q),
                        sigma: g.detach(hidden.sigma),
                        s: g.detach(hidden.s),
                    };
                }
            }
            let prior = g.row_map(x_prev, row.clone())?;
            let z_hat = g.select_cols(prior, sel)?;
            let fv = g.constant(frame.clone());
            let (z, stats) = self.encoder.forward(g, be, fv, Some(prior), bn)?;
            if bn == BnMode::Batch {
                bn_stats.push(stats);
            }
            let innov = g.sub(z, z_hat)?;
            let innov = g.wrap_angles(innov, &self.gain.arch.angular_latent)?;
            let feats = self.gain.features(
                g,
                &StepInputs {
                    z,
                    z_prev,
                    innovation: innov,
                    prior,
                    x_prev,
                    prior_prev,
                },
            )?;
            let (k_t, h) = self.gain.forward(g, bg, hidden, feats)?;
            let corr = g.bmv(k_t, innov)?;
            let x = g.add(prior, corr)?;
            estimates.push(x);
            hidden = h;
            prior_prev = prior;
            x_prev = x;
            z_prev = z;
        }
        Ok(Rollout {
            estimates,
            bn_stats,
            hidden,
        })
    }
}

/// Recurrent context of one inference rollout.
#[derive(Clone, Debug)]
pub struct PipelineState {
    pub x: Vec<f64>,
    prior_prev: Vec<f64>,
    z_prev: Vec<f64>,
    gain: GainRuntime,
    prior: Vec<f64>,
    innov: Vec<f64>,
    k: Vec<f64>,
}

impl PipelineState {
    pub fn hidden_norm(&self) -> f64 {
        self.gain.hidden_norm()
    }
}

impl LatentKalmanNet<f32> {
    /// Fresh rollout context from `x̂_0`.
    pub fn start(&self, x0_hat: &[f64]) -> PipelineState {
        self.start_with(self.gain.runtime(), x0_hat)
    }

    fn start_with(&self, mut gain: GainRuntime, x0_hat: &[f64]) -> PipelineState {
        gain.reset();
        let (m, p) = (self.model.dim(), self.selection.p());
        PipelineState {
            x: x0_hat.to_vec(),
            prior_prev: x0_hat.to_vec(),
            z_prev: self.selection.apply(x0_hat),
            gain,
            prior: vec![0.0; m],
            innov: vec![0.0; p],
            k: vec![0.0; m * p],
        }
    }

    /// Prediction and `ẑ_{t|t−1}` for the next step; the encoder call sits
    /// between this and [`LatentKalmanNet::finish_step`].
    fn predict(&self, st: &mut PipelineState) {
        self.model.evolve(&st.x, &mut st.prior);
    }

    fn finish_step(&self, st: &mut PipelineState, z: &[f64]) -> Result<()> {
        let (m, p) = (self.model.dim(), self.selection.p());
        let sel = self.selection.indices();
        for j in 0..p {
            st.innov[j] = z[j] - st.prior[sel[j]];
        }
        wrap_residual(&mut st.innov, &self.gain.arch.angular_latent);
        st.gain.step(z, &st.z_prev, &st.innov, &st.prior, &st.x, &st.prior_prev, &mut st.k);
        st.prior_prev.copy_from_slice(&st.prior);
        st.z_prev.copy_from_slice(z);
        for i in 0..m {
            let mut acc = st.prior[i];
            for j in 0..p {
                acc += st.k[i * p + j] * st.innov[j];
            }
            st.x[i] = acc;
        }
        if st.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pipeline estimate".into()));
        }
        Ok(())
    }

    /// One inference step; returns `x̂_t`.
    pub fn infer_step<'a>(&self, st: &'a mut PipelineState, frame: &[f32]) -> Result<&'a [f64]> {
        self.predict(st);
        let z = self.encoder.encode_batch_with(frame, Some(&st.prior), ExecMode::Sequential)?;
        self.finish_step(st, &z)?;
        Ok(&st.x)
    }

    /// Estimates for a whole frame sequence; row 0 is `x̂_0` and frame 0 is
    /// not used.
    pub fn infer_trajectory(&self, frames: &[f32], x0_hat: &[f64]) -> Result<Vec<f64>> {
        let n = self.encoder.arch.height * self.encoder.arch.width;
        let mut st = self.start(x0_hat);
        let mut out = Vec::with_capacity(frames.len() / n * x0_hat.len());
        out.extend_from_slice(x0_hat);
        for frame in frames.chunks_exact(n).skip(1) {
            out.extend_from_slice(self.infer_step(&mut st, frame)?);
        }
        Ok(out)
    }

    /// Lock-step inference over equally long trajectories, batching the
    /// encoder across them. Results equal per-trajectory
    /// [`LatentKalmanNet::infer_trajectory`] up to float rounding.
    pub fn infer_batch(&self, frames: &[&[f32]], x0_hats: &[Vec<f64>], exec: ExecMode) -> Result<Vec<Vec<f64>>> {
        let n = self.encoder.arch.height * self.encoder.arch.width;
        let m = self.model.dim();
        let p = self.selection.p();
        let b = frames.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let steps = frames[0].len() / n;
        if frames.iter().any(|f| f.len() != steps * n) || x0_hats.len() != b {
            return Err(Error::Config("batched inference needs equally long trajectories".into()));
        }
        let rt = self.gain.runtime();
        let mut states: Vec<PipelineState> = x0_hats.iter().map(|x| self.start_with(rt.clone(), x)).collect();
        let mut out: Vec<Vec<f64>> = x0_hats
            .iter()
            .map(|x| {
                let mut v = Vec::with_capacity(steps * m);
                v.extend_from_slice(x);
                v
            })
            .collect();
        let mut fbuf = Vec::with_capacity(b * n);
        let mut pbuf = Vec::with_capacity(b * m);
        for t in 1..steps {
            fbuf.clear();
            pbuf.clear();
            for (st, f) in states.iter_mut().zip(frames) {
                self.predict(st);
                fbuf.extend_from_slice(&f[t * n..(t + 1) * n]);
                pbuf.extend_from_slice(&st.prior);
            }
            let z = self.encoder.encode_batch_with(&fbuf, Some(&pbuf), exec)?;
            for (i, st) in states.iter_mut().enumerate() {
                self.finish_step(st, &z[i * p..(i + 1) * p])?;
                out[i].extend_from_slice(&st.x);
            }
        }
        Ok(out)
    }

    /// Saves `encoder/`, `gain/` and `pipeline.json` under `dir`.
    pub fn save(&self, dir: &Path, log: Option<&TrainLog>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(storage(dir))?;
        self.encoder.save(&dir.join("encoder"))?;
        self.gain.save(&dir.join("gain"))?;
        let meta = serde_json::json!({ "model": self.model, "selection": self.selection, "log": log });
        let path = dir.join("pipeline.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format {
            field: "pipeline.json".into(),
            msg: e.to_string(),
        })?;
        std::fs::write(&path, text).map_err(storage(&path))
    }

    pub fn load(dir: &Path) -> Result<(Self, Option<TrainLog>)> {
        let path = dir.join("pipeline.json");
        let text = std::fs::read_to_string(&path).map_err(storage(&path))?;
        let fmt = |e: serde_json::Error| Error::Format {
            field: "pipeline.json".into(),
            msg: e.to_string(),
        };
        let meta: serde_json::Value = serde_json::from_str(&text).map_err(fmt)?;
        let model: Model = serde_json::from_value(meta["model"].clone()).map_err(fmt)?;
        let selection: SelectionMatrix = serde_json::from_value(meta["selection"].clone()).map_err(fmt)?;
        let log: Option<TrainLog> = serde_json::from_value(meta["log"].clone()).map_err(fmt)?;
        let enc = Encoder::load(&dir.join("encoder"))?;
        let gain = GainNet::load(&dir.join("gain"))?;
        Ok((Self::new(model, selection, enc, gain)?, log))
    }
}

/// Learning rates, penalties and pass structure of the training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warm_start: EncoderTrainConfig,
    /// Alternating epochs.
    pub epochs: usize,
    /// Trajectories per batch.
    pub batch_size: usize,
    pub gain_optimizer: OptimizerConfig,
    pub encoder_optimizer: OptimizerConfig,
    /// Global gradient-norm bound in both passes.
    pub clip_norm: f64,
    /// Truncated backpropagation window in steps (full rollouts if `None`).
    pub bptt_window: Option<usize>,
    pub seed: u64,
    /// Return the parameters of the epoch with the lowest validation error
    /// instead of the last.
    pub select_best: bool,
    /// Fine-tune the encoder with its running normalization statistics
    /// instead of per-step batch statistics, and leave those statistics as
    /// the warm start set them.
    #[serde(default)]
    pub freeze_bn_stats: bool,
    /// Applied to both learning rates over the alternating epochs.
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(skip)]
    pub exec: ExecMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassStats {
    /// Mean rollout loss over the pass.
    pub loss: f64,
    /// Largest pre-clipping gradient norm.
    pub max_grad_norm: f64,
    pub clipped_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gain_pass: PassStats,
    pub encoder_pass: PassStats,
    /// Validation MSE on the reporting coordinates.
    pub val_mse: f64,
    /// Training loss rose more than 0.5 dB above the best so far.
    pub spike: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub schedule: Option<TrainSchedule>,
    /// Empty when the encoder was warm-started elsewhere.
    pub warm_start: Vec<EncoderEpoch>,
    pub warm_start_reused: bool,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

pub struct TrainOutcome {
    pub net: LatentKalmanNet<f32>,
    pub log: TrainLog,
}

/// The default `σ_prior` of the warm start: three process-noise standard
/// deviations.
pub fn default_prior_sigma(spec: &SsModelSpec) -> f64 {
    3.0 * spec.q2.sqrt()
}

/// Stacked inputs of one batch of trajectories.
pub struct BatchData<T> {
    /// One `[B, 1, H, W]` tensor per step `t ≥ 1`.
    pub frames: Vec<Tensor<T>>,
    /// One `[B, m]` tensor per step `t ≥ 1`.
    pub targets: Vec<Tensor<T>>,
    pub x0: Tensor<T>,
}

impl<T: Real> BatchData<T> {
    pub fn gather(ds: &Dataset, encoder: &Encoder<T>, idx: &[usize], x0_seed: u64) -> Self {
        let (m, t_len) = (ds.manifest.m, ds.len_t());
        let b = idx.len();
        let mut frames = Vec::with_capacity(t_len.saturating_sub(1));
        let mut targets = Vec::with_capacity(t_len.saturating_sub(1));
        let mut fbuf = Vec::new();
        for t in 1..t_len {
            fbuf.clear();
            let mut tgt = Vec::with_capacity(b * m);
            for &d in idx {
                let tr = ds.trajectory(d);
                fbuf.extend_from_slice(tr.frame(t));
                tgt.extend(tr.state(t).iter().map(|&v| T::lit(v as f64)));
            }
            frames.push(encoder.frame_tensor(&fbuf));
            targets.push(Tensor::new(&[b, m], tgt));
        }
        let x0 = idx
            .iter()
            .flat_map(|&d| initial_estimate(ds.trajectory(d).state(0), x0_seed, d))
            .map(T::lit)
            .collect();
        Self {
            frames,
            targets,
            x0: Tensor::new(&[b, m], x0),
        }
    }
}

/// Mean over steps and batch of `‖x̂_t − x_t‖²`, angular coordinates wrapped.
pub fn rollout_loss<T: Real>(
    g: &mut Graph<T>,
    estimates: &[Var],
    targets: &[Tensor<T>],
    angular: &[usize],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (&x, tgt) in estimates.iter().zip(targets) {
        count = tgt.shape()[0] * estimates.len();
        let tv = g.constant(tgt.clone());
        let r = g.sub(x, tv)?;
        let r = g.wrap_angles(r, angular)?;
        let sq = g.square(r);
        let s = g.sum(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Config("rollout needs at least two time steps".into()))?;
    Ok(g.scale(total, T::lit(1.0 / count.max(1) as f64)))
}

/// Which parameter set a pass updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Gain,
    Encoder,
}

/// One pass over `batches`, updating only the parameters of `phase`.
pub fn training_pass(
    net: &mut LatentKalmanNet<f32>,
    ds: &Dataset,
    batches: &[Vec<usize>],
    phase: Phase,
    opt: &mut Optimizer<f32>,
    schedule: &TrainSchedule,
    x0_seed: u64,
    epoch: usize,
) -> Result<PassStats> {
    let angular = net.model.angular().to_vec();
    net.encoder.params.set_frozen(phase == Phase::Gain);
    net.gain.params.set_frozen(phase == Phase::Encoder);
    let batch_stats = phase == Phase::Encoder && !schedule.freeze_bn_stats;
    let bn = if batch_stats { BnMode::Batch } else { BnMode::Running };
    let mut stats = PassStats {
        loss: 0.0,
        max_grad_norm: 0.0,
        clipped_batches: 0,
    };
    let mut seen = 0;
    let result = (|| -> Result<()> {
        for idx in batches {
            let data = BatchData::gather(ds, &net.encoder, idx, x0_seed);
            let mut g = Graph::with_exec(schedule.exec);
            let be = net.encoder.params.bind(&mut g);
            let bg = net.gain.params.bind(&mut g);
            let x0 = g.constant(data.x0.clone());
            let ro = net.rollout(&mut g, &be, &bg, &data.frames, x0, bn, schedule.bptt_window)?;
            let loss = rollout_loss(&mut g, &ro.estimates, &data.targets, &angular)?;
            let value = g.scalar(loss) as f64;
            let diverged = |msg: String| Error::Divergence {
                phase: format!("{phase:?} pass"),
                epoch,
                msg,
            };
            if !value.is_finite() {
                return Err(diverged(format!("loss {value}")));
            }
            g.backward(loss)?;
            let set = match phase {
                Phase::Gain => &mut net.gain.params,
                Phase::Encoder => &mut net.encoder.params,
            };
            set.accumulate(&g)?;
            let norm = clip_grad_norm(&mut [&mut *set], schedule.clip_norm as f32) as f64;
            if !norm.is_finite() {
                set.zero_grad();
                return Err(diverged(format!("gradient norm {norm}")));
            }
            stats.max_grad_norm = stats.max_grad_norm.max(norm);
            stats.clipped_batches += (norm > schedule.clip_norm) as usize;
            opt.step(set).map_err(|e| diverged(e.to_string()))?;
            if batch_stats {
                let avg = average_stats(&ro.bn_stats);
                net.encoder.update_running(&avg);
            }
            stats.loss += value * idx.len() as f64;
            seen += idx.len();
        }
        Ok(())
    })();
    net.encoder.params.set_frozen(false);
    net.gain.params.set_frozen(false);
    result?;
    stats.loss /= seen.max(1) as f64;
    Ok(stats)
}

fn average_stats<T: Real>(per_step: &[Vec<BatchStats<T>>]) -> Vec<BatchStats<T>> {
    let Some(first) = per_step.first() else {
        return Vec::new();
    };
    let k = T::lit(1.0 / per_step.len() as f64);
    first
        .iter()
        .enumerate()
        .map(|(layer, s0)| {
            let mut mean = vec![T::zero(); s0.mean.len()];
            let mut var = vec![T::zero(); s0.var.len()];
            for step in per_step {
                for (a, &b) in mean.iter_mut().zip(&step[layer].mean) {
                    *a += b * k;
                }
                for (a, &b) in var.iter_mut().zip(&step[layer].var) {
                    *a += b * k;
                }
            }
            BatchStats { mean, var }
        })
        .collect()
}

/// Mean validation MSE of `net` on the reporting coordinates.
pub fn validation_mse(net: &LatentKalmanNet<f32>, ds: &Dataset, spec: &SsModelSpec, exec: ExecMode) -> Result<f64> {
    let split = ds.splits().validation;
    let split = if split.is_empty() { ds.splits().train } else { split };
    let err = ErrorSpec::for_model(spec);
    let idx: Vec<usize> = split.collect();
    let frames: Vec<&[f32]> = idx.iter().map(|&d| ds.trajectory(d).frames).collect();
    let x0s: Vec<Vec<f64>> = idx
        .iter()
        .map(|&d| initial_estimate(ds.trajectory(d).state(0), EVAL_INIT_SEED, d))
        .collect();
    let est = net.infer_batch(&frames, &x0s, exec)?;
    let total: f64 = idx.iter().zip(&est).map(|(&d, e)| err.trajectory_mse(e, &ds.trajectory(d))).sum();
    Ok(total / idx.len().max(1) as f64)
}

/// Warm start (unless `warm` supplies an already warm-started encoder) and
/// alternating training. `spec` describes the data; `filter_model` is the
/// dynamics the pipeline assumes.
pub fn train(
    ds: &Dataset,
    spec: &SsModelSpec,
    filter_model: Model,
    schedule: &TrainSchedule,
    warm: Option<Encoder<f32>>,
) -> Result<TrainOutcome> {
    schedule.gain_optimizer.validate().map_err(Error::Config)?;
    schedule.encoder_optimizer.validate().map_err(Error::Config)?;
    if schedule.batch_size == 0 || !(schedule.clip_norm > 0.0) {
        return Err(Error::Config("batch size and clip norm must be positive".into()));
    }
    let mut log = TrainLog {
        schedule: Some(schedule.clone()),
        ..Default::default()
    };
    let encoder = match warm {
        Some(enc) => {
            log.warm_start_reused = true;
            enc
        }
        None => {
            let w = train_encoder(ds, spec, &schedule.warm_start)?;
            log.warm_start = w.log;
            w.encoder
        }
    };
    let sel = spec.selection.indices();
    let angular_latent = spec.selection.angular_rows(filter_model.angular());
    let arch = GainNetArch::for_dims(filter_model.dim(), sel, filter_model.angular(), &angular_latent);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let gain = GainNet::new(arch, &mut rng)?;
    let mut net = LatentKalmanNet::new(filter_model, spec.selection.clone(), encoder, gain)?;

    let mut opt_f = Optimizer::new(schedule.gain_optimizer);
    let mut opt_e = Optimizer::new(schedule.encoder_optimizer);
    let mut order: Vec<usize> = ds.splits().train.collect();
    let mut best: Option<(f64, LatentKalmanNet<f32>)> = None;
    let mut initial_loss = None;
    let mut best_loss = f64::INFINITY;
    let mut blown = 0;
    for epoch in 0..schedule.epochs {
        let k = schedule.lr_schedule.factor(epoch, schedule.epochs);
        opt_f.set_lr(schedule.gain_optimizer.lr * k);
        opt_e.set_lr(schedule.encoder_optimizer.lr * k);
        order.shuffle(&mut rng);
        let batches: Vec<Vec<usize>> = order.chunks(schedule.batch_size).map(<[usize]>::to_vec).collect();
        let x0_seed = schedule.seed.wrapping_add(1 + epoch as u64);
        let gain_pass = training_pass(&mut net, ds, &batches, Phase::Gain, &mut opt_f, schedule, x0_seed, epoch)?;
        let encoder_pass =
            training_pass(&mut net, ds, &batches, Phase::Encoder, &mut opt_e, schedule, x0_seed, epoch)?;
        let loss = gain_pass.loss;
        let initial = *initial_loss.get_or_insert(loss);
        blown = if loss > 10.0 * initial { blown + 1 } else { 0 };
        if blown >= 3 {
            return Err(Error::Divergence {
                phase: "alternating".into(),
                epoch,
                msg: format!("loss {loss:.4e} above ten times the initial {initial:.4e} for three epochs"),
            });
        }
        let spike = 10.0 * (loss / best_loss).log10() > 0.5;
        best_loss = best_loss.min(loss);
        let val_mse = validation_mse(&net, ds, spec, schedule.exec)?;
        if spike {
            log::warn!("epoch {epoch}: training loss spike to {loss:.4e}");
        }
        log::info!(
            "epoch {epoch}: gain pass {:.4e}, encoder pass {:.4e}, validation {val_mse:.4e}",
            gain_pass.loss,
            encoder_pass.loss
        );
        log.epochs.push(EpochRecord {
            epoch,
            gain_pass,
            encoder_pass,
            val_mse,
            spike,
        });
        if schedule.select_best && best.as_ref().is_none_or(|(v, _)| val_mse < *v) {
            best = Some((val_mse, net.clone()));
            log.best_epoch = Some(epoch);
        }
    }
    if let Some((_, b)) = best {
        net = b;
    }
    Ok(TrainOutcome { net, log })
}

//! Convolutional image encoder, optionally fed the predicted state, and its
//! supervised training loop.
//!
//! Layout: three stride-2 convolutions (each followed by ReLU and batch
//! norm), flatten, a hidden dense layer with ReLU and a linear head of width
//! `p`. When prior-fed, the predicted state passes through its own dense
//! layer and is concatenated with the image features before the hidden
//! layer.

use std::path::Path;

use latentkf_autodiff::conv::ConvGeom;
use latentkf_autodiff::{
    BatchNorm, BatchStats, Binding, Conv2d, Dense, ExecMode, Graph, LrSchedule, Optimizer, OptimizerConfig, ParamSet, Real,
    Tensor, Var,
};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::filters::LatentSource;
use crate::ssm::{add_gaussian, wrap_residual, SsModelSpec};

/// Per-coordinate affine normalization `(x − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation of the first `count` trajectories;
    /// angular coordinates keep the identity map.
    pub fn from_states(ds: &Dataset, count: usize, angular: &[usize]) -> Self {
        let m = ds.manifest.m;
        let rows = count.min(ds.count()) * ds.len_t();
        let mut mean = vec![0.0; m];
        let mut sq = vec![0.0; m];
        for row in ds.states[..rows * m].chunks_exact(m) {
            for i in 0..m {
                mean[i] += row[i] as f64;
                sq[i] += (row[i] as f64).powi(2);
            }
        }
        let n = rows.max(1) as f64;
        let mut scale = vec![1.0; m];
        for i in 0..m {
            mean[i] /= n;
            scale[i] = (sq[i] / n - mean[i] * mean[i]).max(0.0).sqrt().max(1e-3);
            if angular.contains(&i) {
                mean[i] = 0.0;
                scale[i] = 1.0;
            }
        }
        Self { mean, scale }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            mean: idx.iter().map(|&i| self.mean[i]).collect(),
            scale: idx.iter().map(|&i| self.scale[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBranch {
    pub m: usize,
    pub width: usize,
    /// Prior coordinates wrapped onto the circle before normalization.
    pub angular: Vec<usize>,
    pub norm: Normalization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub prior: Option<PriorBranch>,
    /// Multiplies raw pixel values.
    pub input_scale: f32,
    /// Output is `mean + scale · head`.
    pub output_norm: Normalization,
    /// Output coordinates compared on the circle.
    pub angular_out: Vec<usize>,
}

impl EncoderArch {
    /// 8/16/32 channels, 3×3 kernels, stride 2, padding 1, hidden width 32.
    pub fn standard(height: usize, width: usize, out_dim: usize) -> Self {
        Self {
            height,
            width,
            channels: vec![8, 16, 32],
            kernel: 3,
            stride: 2,
            padding: 1,
            hidden: 32,
            out_dim,
            prior: None,
            input_scale: 1.0,
            output_norm: Normalization::identity(out_dim),
            angular_out: Vec::new(),
        }
    }

    /// The architecture for `spec`, normalized with statistics from the
    /// training split of `ds`.
    pub fn for_model(spec: &SsModelSpec, ds: &Dataset, with_prior: bool) -> Self {
        let (h, w) = spec.sensor.dims();
        let sel = spec.selection.indices();
        let norm = Normalization::from_states(ds, ds.splits().train.len(), spec.angular());
        let mut arch = Self::standard(h, w, spec.p());
        arch.input_scale = spec.sensor.input_scale();
        arch.output_norm = norm.select(sel);
        arch.angular_out = spec.selection.angular_rows(spec.angular());
        if with_prior {
            arch.prior = Some(PriorBranch {
                m: spec.m(),
                width: 32,
                angular: spec.angular().to_vec(),
                norm,
            });
        }
        arch
    }

    /// Activation shapes from input to output, excluding the batch axis.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![vec![1, self.height, self.width]];
        let (mut c, mut h, mut w) = (1, self.height, self.width);
        for &out in &self.channels {
            let geom = ConvGeom::new(&[1, c, h, w], &[out, c, self.kernel, self.kernel], self.stride, self.padding)
                .ok_or_else(|| Error::Config(format!("encoder input {}x{} too small", self.height, self.width)))?;
            c = out;
            h = geom.out_height;
            w = geom.out_width;
            shapes.push(vec![c, h, w]);
        }
        shapes.push(vec![c * h * w]);
        shapes.push(vec![self.hidden]);
        shapes.push(vec![self.out_dim]);
        Ok(shapes)
    }

    pub fn flat_features(&self) -> Result<usize> {
        let s = self.layer_shapes()?;
        Ok(s[s.len() - 3][0])
    }

    /// Floating-point operations of one forward pass (two per
    /// multiply-add, elementwise ops ignored).
    pub fn op_count(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let mut macs = 0;
        let mut cin = 1;
        for s in &shapes[1..=self.channels.len()] {
            macs += s[0] * s[1] * s[2] * cin * self.kernel * self.kernel;
            cin = s[0];
        }
        let mut fc_in = self.flat_features()?;
        if let Some(p) = &self.prior {
            macs += p.m * p.width;
            fc_in += p.width;
        }
        macs += fc_in * self.hidden + self.hidden * self.out_dim;
        Ok(2 * macs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch's own statistics.
    Batch,
    /// Normalize with the running estimates.
    Running,
}

pub struct Encoder<T: Real> {
    pub arch: EncoderArch,
    pub params: ParamSet<T>,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm>,
    prior_fc: Option<Dense>,
    fc1: Dense,
    fc2: Dense,
}

impl<T: Real> Clone for Encoder<T> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.clone(),
            convs: self.convs.clone(),
            bns: self.bns.clone(),
            prior_fc: self.prior_fc.clone(),
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
        }
    }
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: EncoderArch, rng: &mut R) -> Result<Self> {
        let flat = arch.flat_features()?;
        if arch.out_dim == 0 || arch.output_norm.mean.len() != arch.out_dim {
            return Err(Error::Config(format!("encoder output width {}", arch.out_dim)));
        }
        let mut ps = ParamSet::new("encoder");
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 1;
        for (i, &c) in arch.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut ps, &format!("conv{i}"), cin, c, arch.kernel, arch.stride, arch.padding, rng)?);
            bns.push(BatchNorm::new(&mut ps, &format!("bn{i}"), c)?);
            cin = c;
        }
        let prior_fc = match &arch.prior {
            Some(p) => Some(Dense::new(&mut ps, "prior_fc", p.m, p.width, rng)?),
            None => None,
        };
        let fc_in = flat + arch.prior.as_ref().map_or(0, |p| p.width);
        let fc1 = Dense::new(&mut ps, "fc1", fc_in, arch.hidden, rng)?;
        let fc2 = Dense::new(&mut ps, "fc2", arch.hidden, arch.out_dim, rng)?;
        Ok(Self {
            arch,
            params: ps,
            convs,
            bns,
            prior_fc,
            fc1,
            fc2,
        })
    }

    /// Rebuild around existing parameter values (names and shapes must
    /// match a fresh construction).
    pub fn from_params(arch: EncoderArch, params: ParamSet<T>) -> Result<Self> {
        let mut enc = Self::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        adopt(&mut enc.params, params)?;
        Ok(enc)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Scaled frame batch `[B, 1, H, W]`.
    pub fn frame_tensor(&self, frames: &[f32]) -> Tensor<T> {
        let n = self.arch.height * self.arch.width;
        let b = frames.len() / n;
        let s = self.arch.input_scale;
        Tensor::new(
            &[b, 1, self.arch.height, self.arch.width],
            frames.iter().map(|&v| T::lit((v * s) as f64)).collect(),
        )
    }

    /// Forward pass. `frames` is `[B, 1, H, W]` (already scaled), `prior`
    /// is `[B, m]` in state units. Returns `z` in state units and, in batch
    /// mode, the batch-norm statistics.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        frames: Var,
        prior: Option<Var>,
        bn: BnMode,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let batch = g.shape(frames)[0];
        let mut h = frames;
        let mut stats = Vec::new();
        for (conv, norm) in self.convs.iter().zip(&self.bns) {
            let c = conv.forward(g, b, h)?;
            let r = g.relu(c);
            let (y, s) = norm.forward(g, b, &self.params, r, bn == BnMode::Batch)?;
            stats.extend(s);
            h = y;
        }
        let mut feat = g.flatten(h)?;
        match (&self.prior_fc, &self.arch.prior, prior) {
            (Some(fc), Some(branch), Some(p)) => {
                let wrapped = g.wrap_angles(p, &branch.angular)?;
                let normed = normalize(g, wrapped, &branch.norm, batch)?;
                let e = fc.forward(g, b, normed)?;
                feat = g.concat(&[feat, e])?;
            }
            (None, None, None) => {}
            _ => return Err(Error::Config("prior input does not match the encoder architecture".into())),
        }
        let hid = self.fc1.forward(g, b, feat)?;
        let hid = g.relu(hid);
        let head = self.fc2.forward(g, b, hid)?;
        let z = denormalize(g, head, &self.arch.output_norm, batch)?;
        Ok((z, stats))
    }

    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        for (bn, s) in self.bns.iter().zip(stats) {
            bn.update_running(&mut self.params, s);
        }
    }

    /// Inference-mode encoding of a batch of frames (`B·n` pixels) and,
    /// when prior-fed, priors (`B·m`). Returns `B·p` latents.
    pub fn encode_batch(&self, frames: &[f32], priors: Option<&[f64]>) -> Result<Vec<f64>> {
        self.encode_batch_with(frames, priors, ExecMode::default())
    }

    pub fn encode_batch_with(&self, frames: &[f32], priors: Option<&[f64]>, exec: ExecMode) -> Result<Vec<f64>> {
        let n = self.arch.height * self.arch.width;
        if frames.is_empty() || frames.len() % n != 0 {
            return Err(Error::Dimension {
                what: "encoder frames",
                expected: n,
                got: frames.len(),
            });
        }
        let batch = frames.len() / n;
        let mut g = Graph::with_exec(exec);
        let b = self.params.bind(&mut g);
        let x = g.constant(self.frame_tensor(frames));
        let p = match (priors, &self.arch.prior) {
            (Some(pr), Some(branch)) => {
                if pr.len() != batch * branch.m {
                    return Err(Error::Dimension {
                        what: "encoder priors",
                        expected: batch * branch.m,
                        got: pr.len(),
                    });
                }
                Some(g.constant(Tensor::new(&[batch, branch.m], pr.iter().map(|&v| T::lit(v)).collect())))
            }
            (None, None) => None,
            _ => return Err(Error::Config("prior input does not match the encoder architecture".into())),
        };
        let (z, _) = self.forward(&mut g, &b, x, p, BnMode::Running)?;
        let out: Vec<f64> = g.value(z).data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(out)
    }

    pub fn encode(&self, frame: &[f32]) -> Result<Vec<f64>> {
        self.encode_batch(frame, None)
    }

    pub fn encode_with_prior(&self, frame: &[f32], prior: &[f64]) -> Result<Vec<f64>> {
        self.encode_batch(frame, Some(prior))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "arch": self.arch });
        Ok(self.params.save(dir, meta)?)
    }
}

impl Encoder<f32> {
    pub fn load(dir: &Path) -> Result<Self> {
        let (ps, meta) = ParamSet::load(dir)?;
        let arch: EncoderArch = serde_json::from_value(meta["arch"].clone()).map_err(|e| Error::Format {
            field: "encoder manifest meta.arch".into(),
            msg: e.to_string(),
        })?;
        Self::from_params(arch, ps)
    }
}

impl<T: Real> LatentSource for Encoder<T> {
    fn latent_dim(&self) -> usize {
        self.arch.out_dim
    }

    fn latent(&self, frame: &[f32], prior: &[f64], out: &mut [f64]) -> Result<()> {
        let z = if self.arch.prior.is_some() {
            self.encode_batch_with(frame, Some(prior), ExecMode::Sequential)?
        } else {
            self.encode_batch_with(frame, None, ExecMode::Sequential)?
        };
        out.copy_from_slice(&z);
        Ok(())
    }
}

/// Copy values from `src` into `dst` by name, checking shapes.
pub(crate) fn adopt<T: Real>(dst: &mut ParamSet<T>, src: ParamSet<T>) -> Result<()> {
    let names: Vec<String> = dst.ids().map(|id| dst.name(id).to_string()).collect();
    if src.ids().count() != names.len() {
        return Err(Error::Format {
            field: "params".into(),
            msg: format!("expected {} tensors, found {}", names.len(), src.ids().count()),
        });
    }
    for name in names {
        let d = dst.id_of(&name)?;
        let s = src.id_of(&name).map_err(|_| Error::Format {
            field: name.clone(),
            msg: "missing from checkpoint".into(),
        })?;
        if dst.get(d).shape() != src.get(s).shape() {
            return Err(Error::Format {
                field: name,
                msg: format!("shape {:?} vs {:?}", src.get(s).shape(), dst.get(d).shape()),
            });
        }
        *dst.get_mut(d) = src.get(s).clone();
    }
    Ok(())
}

fn row_constant<T: Real>(g: &mut Graph<T>, row: &[f64], batch: usize) -> Var {
    let data = (0..batch).flat_map(|_| row.iter().map(|&v| T::lit(v))).collect();
    g.constant(Tensor::new(&[batch, row.len()], data))
}

pub(crate) fn normalize<T: Real>(g: &mut Graph<T>, x: Var, norm: &Normalization, batch: usize) -> Result<Var> {
    let mean = row_constant(g, &norm.mean, batch);
    let inv: Vec<f64> = norm.scale.iter().map(|s| 1.0 / s).collect();
    let inv = row_constant(g, &inv, batch);
    let c = g.sub(x, mean)?;
    Ok(g.mul(c, inv)?)
}

pub(crate) fn denormalize<T: Real>(g: &mut Graph<T>, x: Var, norm: &Normalization, batch: usize) -> Result<Var> {
    let scale = row_constant(g, &norm.scale, batch);
    let mean = row_constant(g, &norm.mean, batch);
    let s = g.mul(x, scale)?;
    Ok(g.add(s, mean)?)
}

/// What the prior branch sees during supervised training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorMode {
    None,
    /// True state plus `N(0, sigma²·I)`.
    NoisyGroundTruth { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub prior: PriorMode,
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Keep the epoch with the lowest validation MSE instead of the last.
    #[serde(default)]
    pub select_best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpoch {
    pub epoch: usize,
    /// Mean per-sample loss in normalized units.
    pub train_loss: f64,
    /// Validation MSE of the observable coordinates in state units.
    pub val_mse: f64,
}

pub struct EncoderTraining {
    pub encoder: Encoder<f32>,
    /// Covariance of `z − P·x` on the validation split.
    pub r_hat: DMatrix<f64>,
    pub log: Vec<EncoderEpoch>,
}

/// Train a fresh encoder on the training split by minimizing the squared
/// error between `z` and the observable coordinates of the state.
pub fn train_encoder(ds: &Dataset, spec: &SsModelSpec, cfg: &EncoderTrainConfig) -> Result<EncoderTraining> {
    let with_prior = matches!(cfg.prior, PriorMode::NoisyGroundTruth { .. });
    let arch = EncoderArch::for_model(spec, ds, with_prior);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc = Encoder::new(arch, &mut rng)?;
    continue_training(enc, ds, spec, cfg)
}

/// Supervised training starting from an existing encoder.
pub fn continue_training(
    mut enc: Encoder<f32>,
    ds: &Dataset,
    spec: &SsModelSpec,
    cfg: &EncoderTrainConfig,
) -> Result<EncoderTraining> {
    cfg.optimizer.validate().map_err(Error::Config)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let sigma = match cfg.prior {
        PriorMode::None => None,
        PriorMode::NoisyGroundTruth { sigma } => Some(sigma),
    };
    if sigma.is_some() != enc.arch.prior.is_some() {
        return Err(Error::Config("prior mode does not match the encoder architecture".into()));
    }
    let splits = ds.splits();
    let t_len = ds.len_t();
    let mut samples: Vec<(usize, usize)> = splits.train.clone().flat_map(|d| (0..t_len).map(move |t| (d, t))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e5c0);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Encoder<f32>)> = None;
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.optimizer.lr * cfg.lr_schedule.factor(epoch, cfg.epochs));
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            let loss = encoder_batch_step(&mut enc, ds, spec, batch, sigma, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    phase: "encoder".into(),
                    epoch,
                    msg: format!("loss {loss}"),
                });
            }
            opt.step(&mut enc.params).map_err(|e| Error::Divergence {
                phase: "encoder".into(),
                epoch,
                msg: e.to_string(),
            })?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / samples.len().max(1) as f64;
        let (val_mse, _) = validation_residuals(&enc, ds, spec, sigma, cfg.seed)?;
        log::info!("encoder epoch {epoch}: train {train_loss:.5}, validation MSE {val_mse:.5}");
        log.push(EncoderEpoch {
            epoch,
            train_loss,
            val_mse,
        });
        if cfg.select_best && best.as_ref().is_none_or(|(v, _)| val_mse < *v) {
            best = Some((val_mse, enc.clone()));
        }
    }
    if let Some((_, b)) = best {
        enc = b;
    }
    let (_, r_hat) = validation_residuals(&enc, ds, spec, sigma, cfg.seed)?;
    Ok(EncoderTraining {
        encoder: enc,
        r_hat,
        log,
    })
}

/// Forward/backward on one batch; gradients are left on the parameter set.
fn encoder_batch_step(
    enc: &mut Encoder<f32>,
    ds: &Dataset,
    spec: &SsModelSpec,
    batch: &[(usize, usize)],
    sigma: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (m, n, p) = (spec.m(), spec.n(), spec.p());
    let sel = spec.selection.indices();
    let bsz = batch.len();
    let mut frames = Vec::with_capacity(bsz * n);
    let mut priors = Vec::with_capacity(bsz * m);
    let mut targets = Vec::with_capacity(bsz * p);
    let mut x = vec![0.0; m];
    for &(d, t) in batch {
        let tr = ds.trajectory(d);
        frames.extend_from_slice(tr.frame(t));
        for (xi, &s) in x.iter_mut().zip(tr.state(t)) {
            *xi = s as f64;
        }
        targets.extend(sel.iter().map(|&i| x[i] as f32));
        if let Some(s) = sigma {
            add_gaussian(&mut x, s * s, rng);
            priors.extend(x.iter().map(|&v| v as f32));
        }
    }
    let mut g = Graph::new();
    let b = enc.params.bind(&mut g);
    let xv = g.constant(enc.frame_tensor(&frames));
    let pv = sigma.map(|_| g.constant(Tensor::new(&[bsz, m], priors)));
    let (z, stats) = enc.forward(&mut g, &b, xv, pv, BnMode::Batch)?;
    let tv = g.constant(Tensor::new(&[bsz, p], targets));
    let loss = latent_loss(&mut g, z, tv, &enc.arch, bsz)?;
    let value = g.scalar(loss) as f64;
    g.backward(loss)?;
    enc.params.accumulate(&g)?;
    enc.update_running(&stats);
    Ok(value)
}

/// Mean over the batch of `‖(z − target) / scale‖²` with angular residuals
/// wrapped.
fn latent_loss<T: Real>(g: &mut Graph<T>, z: Var, target: Var, arch: &EncoderArch, batch: usize) -> Result<Var> {
    let r = g.sub(z, target)?;
    let r = g.wrap_angles(r, &arch.angular_out)?;
    let unit = Normalization {
        mean: vec![0.0; arch.out_dim],
        scale: arch.output_norm.scale.clone(),
    };
    let r = normalize(g, r, &unit, batch)?;
    let sq = g.square(r);
    let s = g.sum(sq);
    Ok(g.scale(s, T::lit(1.0 / batch as f64)))
}

/// Validation MSE (state units, observable coordinates) and the residual
/// covariance of `z − P·x`, with priors drawn the same way as in training.
pub fn validation_residuals(
    enc: &Encoder<f32>,
    ds: &Dataset,
    spec: &SsModelSpec,
    sigma: Option<f64>,
    seed: u64,
) -> Result<(f64, DMatrix<f64>)> {
    let split = ds.splits().validation;
    let split = if split.is_empty() { ds.splits().train } else { split };
    let (m, p) = (spec.m(), spec.p());
    let sel = spec.selection.indices();
    let angular = spec.selection.angular_rows(spec.angular());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11d);
    let mut residuals: Vec<f64> = Vec::new();
    for d in split {
        let tr = ds.trajectory(d);
        let mut priors = Vec::with_capacity(tr.len() * m);
        if let Some(s) = sigma {
            for t in 0..tr.len() {
                let mut x = tr.state_f64(t);
                add_gaussian(&mut x, s * s, &mut rng);
                priors.extend(x);
            }
        }
        let z = enc.encode_batch(tr.frames, sigma.map(|_| priors.as_slice()))?;
        for t in 0..tr.len() {
            let x = tr.state(t);
            let mut r: Vec<f64> = (0..p).map(|j| z[t * p + j] - x[sel[j]] as f64).collect();
            wrap_residual(&mut r, &angular);
            residuals.extend(r);
        }
    }
    let count = residuals.len() / p;
    let mse = residuals.iter().map(|r| r * r).sum::<f64>() / count.max(1) as f64;
    let mat = DMatrix::from_row_slice(count, p, &residuals);
    let mean = mat.row_mean();
    let centered = DMatrix::from_fn(count, p, |i, j| mat[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (count.max(2) - 1) as f64;
    Ok((mse, cov))
}

//! Labeled trajectory datasets: generation, the on-disk format and
//! train/validation/test splits.
//!
//! A dataset directory holds `manifest.json` plus two little-endian float32
//! arrays, `states.f32` shaped `(D, T, m)` and `frames.f32` shaped
//! `(D, T, n)`. Index `t = 0` is the initial state and its image.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use latentkf_autodiff::par::map_indices;
use latentkf_autodiff::ExecMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{storage, Error, Result};
use crate::ssm::{add_gaussian, apply_noise_in_place, Dynamics, SsModelSpec};

pub const FORMAT_VERSION: u32 = 1;

/// Rule for drawing `x_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    /// `[φ0, 0]` with `φ0` uniform on `[low, high]`.
    AngleAtRest { low: f64, high: f64 },
    /// `center + N(0, var·I)`, then `burn_in` noisy steps are discarded.
    GaussianBurnIn { center: Vec<f64>, var: f64, burn_in: usize },
    /// The same `x_0` for every trajectory.
    Fixed { x0: Vec<f64> },
}

impl InitialLaw {
    pub fn pendulum() -> Self {
        InitialLaw::AngleAtRest {
            low: std::f64::consts::FRAC_PI_6,
            high: std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn lorenz() -> Self {
        InitialLaw::GaussianBurnIn {
            center: vec![1.0, 1.0, 1.0],
            var: 1.0,
            burn_in: 50,
        }
    }

    /// The default law for a model family.
    pub fn for_spec(spec: &SsModelSpec) -> Self {
        match spec.model {
            crate::ssm::Model::Pendulum(_) => Self::pendulum(),
            crate::ssm::Model::Lorenz(_) => Self::lorenz(),
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        let ok = match self {
            InitialLaw::AngleAtRest { low, high } => m == 2 && low <= high,
            InitialLaw::GaussianBurnIn { center, var, .. } => center.len() == m && *var >= 0.0,
            InitialLaw::Fixed { x0 } => x0.len() == m,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("initial-state law {self:?} does not fit a {m}-dimensional state")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub seed: u64,
    pub x0_law: InitialLaw,
    /// Simulation step; equals the model step unless decimating.
    pub sim_dt: f64,
    /// Keep every `decimation`-th simulated step.
    pub decimation: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 80/10/10 by trajectory; with fewer than ten trajectories validation
    /// and test still get one each when possible.
    pub fn default_for(count: usize) -> Self {
        let validation = if count >= 3 { (count / 10).max(1) } else { 0 };
        let test = if count >= 2 { (count / 10).max(1) } else { 0 };
        Self {
            train: count - validation - test,
            validation,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub model: String,
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub height: usize,
    pub width: usize,
    pub t: usize,
    pub count: usize,
    pub spec: SsModelSpec,
    pub splits: SplitSizes,
    pub generation: GenerationConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub states: Vec<f32>,
    pub frames: Vec<f32>,
}

/// Borrowed view of one trajectory.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryView<'a> {
    pub states: &'a [f32],
    pub frames: &'a [f32],
    pub m: usize,
    pub n: usize,
}

impl<'a> TrajectoryView<'a> {
    pub fn len(&self) -> usize {
        self.states.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, t: usize) -> &'a [f32] {
        &self.states[t * self.m..(t + 1) * self.m]
    }

    pub fn frame(&self, t: usize) -> &'a [f32] {
        &self.frames[t * self.n..(t + 1) * self.n]
    }

    pub fn state_f64(&self, t: usize) -> Vec<f64> {
        self.state(t).iter().map(|&v| v as f64).collect()
    }

    /// The first `len` steps.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self {
            states: &self.states[..len * self.m],
            frames: &self.frames[..len * self.n],
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl Dataset {
    pub fn count(&self) -> usize {
        self.manifest.count
    }

    pub fn len_t(&self) -> usize {
        self.manifest.t
    }

    pub fn trajectory(&self, d: usize) -> TrajectoryView<'_> {
        let (m, n, t) = (self.manifest.m, self.manifest.n, self.manifest.t);
        TrajectoryView {
            states: &self.states[d * t * m..(d + 1) * t * m],
            frames: &self.frames[d * t * n..(d + 1) * t * n],
            m,
            n,
        }
    }

    /// Contiguous index ranges; trajectories are i.i.d. so taking them in
    /// order is an unbiased split.
    pub fn splits(&self) -> Splits {
        let s = self.manifest.splits;
        Splits {
            train: 0..s.train,
            validation: s.train..s.train + s.validation,
            test: s.train + s.validation..s.total(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(storage(dir))?;
        let manifest = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Format {
            field: "manifest.json".into(),
            msg: e.to_string(),
        })?;
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, manifest).map_err(storage(&mpath))?;
        write_f32(&dir.join("states.f32"), &self.states)?;
        write_f32(&dir.join("frames.f32"), &self.frames)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(storage(&mpath))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            field: "manifest.json".into(),
            msg: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                field: "manifest.json".into(),
                msg: format!("unsupported format version {}", manifest.format_version),
            });
        }
        if manifest.splits.total() != manifest.count {
            return Err(Error::Consistency(format!(
                "split sizes sum to {} but count is {}",
                manifest.splits.total(),
                manifest.count
            )));
        }
        let states = read_array(dir, "states.f32", manifest.count, manifest.t * manifest.m)?;
        let frames = read_array(dir, "frames.f32", manifest.count, manifest.t * manifest.n)?;
        Ok(Self {
            manifest,
            states,
            frames,
        })
    }
}

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(storage(path))?;
    f.write_all(&bytes).map_err(storage(path))
}

fn read_array(dir: &Path, name: &str, count: usize, per_traj: usize) -> Result<Vec<f32>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(storage(&path))?;
    let want = count * per_traj * 4;
    if bytes.len() != want {
        let per = per_traj * 4;
        if per > 0 && bytes.len() % per == 0 {
            return Err(Error::Consistency(format!(
                "manifest declares {count} trajectories but {name} holds {}",
                bytes.len() / per
            )));
        }
        return Err(Error::Format {
            field: name.into(),
            msg: format!("expected {want} bytes, found {}", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Independent per-trajectory random stream.
pub fn trajectory_rng(seed: u64, d: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(d as u64);
    rng
}

/// `D` trajectories of length `T` from `spec`: states follow `f` plus
/// Gaussian process noise, frames are rendered and corrupted.
pub fn generate_dataset(
    spec: &SsModelSpec,
    count: usize,
    t: usize,
    x0_law: &InitialLaw,
    seed: u64,
    exec: ExecMode,
) -> Result<Dataset> {
    generate(spec, count, t, x0_law, seed, 1, exec)
}

/// Simulate at `dense_dt` and keep every `ratio`-th step. Process noise is
/// spread over the dense steps (`q²/ratio` each) so the kept sequence has
/// per-step noise comparable to the coarse model.
pub fn generate_decimated(
    spec: &SsModelSpec,
    count: usize,
    t: usize,
    x0_law: &InitialLaw,
    seed: u64,
    dense_dt: f64,
    ratio: usize,
    exec: ExecMode,
) -> Result<Dataset> {
    if ratio == 0 || !(dense_dt > 0.0) {
        return Err(Error::Config(format!("decimation ratio {ratio} with dense step {dense_dt}")));
    }
    let dense = SsModelSpec {
        model: spec.model.with_dt(dense_dt),
        ..spec.clone()
    };
    generate(&dense, count, t, x0_law, seed, ratio, exec)
}

fn generate(
    spec: &SsModelSpec,
    count: usize,
    t: usize,
    x0_law: &InitialLaw,
    seed: u64,
    ratio: usize,
    exec: ExecMode,
) -> Result<Dataset> {
    spec.validate()?;
    x0_law.validate(spec.m())?;
    if count == 0 || t == 0 {
        return Err(Error::Config(format!("dataset needs D ≥ 1 and T ≥ 1, got D={count}, T={t}")));
    }
    let (m, n) = (spec.m(), spec.n());
    let parts = map_indices(exec, count, |d| simulate(spec, t, x0_law, ratio, &mut trajectory_rng(seed, d)));
    let mut states = Vec::with_capacity(count * t * m);
    let mut frames = Vec::with_capacity(count * t * n);
    for part in parts {
        let (s, f) = part?;
        states.extend(s);
        frames.extend(f);
    }
    let (height, width) = spec.sensor.dims();
    let coarse_dt = spec.model.dt() * ratio as f64;
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            model: spec.model.name().into(),
            m,
            n,
            p: spec.p(),
            height,
            width,
            t,
            count,
            spec: SsModelSpec {
                model: spec.model.with_dt(coarse_dt),
                ..spec.clone()
            },
            splits: SplitSizes::default_for(count),
            generation: GenerationConfig {
                seed,
                x0_law: x0_law.clone(),
                sim_dt: spec.model.dt(),
                decimation: ratio,
            },
        },
        states,
        frames,
    })
}

fn simulate(
    spec: &SsModelSpec,
    t: usize,
    law: &InitialLaw,
    ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (m, n) = (spec.m(), spec.n());
    let q2 = spec.q2 / ratio as f64;
    let mut x = vec![0.0; m];
    let mut next = vec![0.0; m];
    let mut advance = |x: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        for _ in 0..ratio {
            spec.model.evolve(x, &mut next);
            add_gaussian(&mut next, q2, rng);
            std::mem::swap(x, &mut next);
        }
    };
    match law {
        InitialLaw::AngleAtRest { low, high } => {
            x[0] = if high > low { rng.random_range(*low..*high) } else { *low };
        }
        InitialLaw::GaussianBurnIn { center, var, burn_in } => {
            x.copy_from_slice(center);
            add_gaussian(&mut x, *var, rng);
            for _ in 0..*burn_in {
                advance(&mut x, rng);
            }
        }
        InitialLaw::Fixed { x0 } => x.copy_from_slice(x0),
    }
    let mut states = Vec::with_capacity(t * m);
    let mut frames = vec![0.0f32; t * n];
    for (step, frame) in frames.chunks_mut(n).enumerate() {
        if step > 0 {
            advance(&mut x, rng);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("simulation blew up at step {step}")));
        }
        states.extend(x.iter().map(|&v| v as f32));
        spec.sensor.render_into(&x, frame)?;
        apply_noise_in_place(frame, spec.obs_noise, rng);
    }
    Ok((states, frames))
}

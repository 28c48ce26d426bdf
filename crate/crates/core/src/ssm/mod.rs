//! State-space model abstractions and the two benchmark systems: a
//! pendulum seen through rod images and a Lorenz attractor seen through a
//! Gaussian point-spread blob.

mod lorenz;
mod noise;
mod pendulum;
mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lorenz::{lorenz_evolve, lorenz_system_matrix, lorenz_transition_matrix, LorenzConfig};
pub use noise::{apply_noise, apply_noise_in_place, ObservationNoise};
pub use pendulum::{pendulum_energy, pendulum_evolve, Pendulum};
pub use render::{render_pendulum, render_psf, Sensor, Viewport, PSF_PEAK};

/// Noise-free state evolution `x_{t+1} = f(x_t)` with its Jacobian.
pub trait Dynamics: Send + Sync {
    fn dim(&self) -> usize;
    fn evolve(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `dim × dim` Jacobian of `evolve` at `x`.
    fn jacobian(&self, x: &[f64], jac: &mut [f64]);
    /// State coordinates that live on the circle.
    fn angular(&self) -> &[usize] {
        &[]
    }
}

/// Central-difference Jacobian of any [`Dynamics`].
pub fn numerical_jacobian(f: &dyn Dynamics, x: &[f64], step: f64, jac: &mut [f64]) {
    let m = f.dim();
    let mut xp = x.to_vec();
    let mut up = vec![0.0; m];
    let mut down = vec![0.0; m];
    for k in 0..m {
        xp[k] = x[k] + step;
        f.evolve(&xp, &mut up);
        xp[k] = x[k] - step;
        f.evolve(&xp, &mut down);
        xp[k] = x[k];
        for i in 0..m {
            jac[i * m + k] = (up[i] - down[i]) / (2.0 * step);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    values: Vec<f64>,
}

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("entry {i} is {}", values[i])));
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// A flattened row-major gray-scale image.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFrame {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl ObservationFrame {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension {
                what: "frame pixels",
                expected: height * width,
                got: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("frame pixels".into()));
        }
        Ok(Self { pixels, height, width })
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// `p × m` matrix with a single one per row, stored as the selected indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    indices: Vec<usize>,
    m: usize,
}

impl SelectionMatrix {
    pub fn new(indices: Vec<usize>, m: usize) -> Result<Self> {
        if indices.is_empty() || indices.len() > m {
            return Err(Error::Config(format!("selection of {} rows from {m} states", indices.len())));
        }
        for (k, &i) in indices.iter().enumerate() {
            if i >= m || indices[..k].contains(&i) {
                return Err(Error::Config(format!("selection index {i} invalid or repeated (m = {m})")));
            }
        }
        Ok(Self { indices, m })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            indices: (0..m).collect(),
            m,
        }
    }

    pub fn p(&self) -> usize {
        self.indices.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }

    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut h = nalgebra::DMatrix::zeros(self.p(), self.m);
        for (r, &c) in self.indices.iter().enumerate() {
            h[(r, c)] = 1.0;
        }
        h
    }

    /// Positions (in observation space) of selected coordinates that are
    /// angles.
    pub fn angular_rows(&self, angular_states: &[usize]) -> Vec<usize> {
        self.indices
            .iter()
            .enumerate()
            .filter(|(_, i)| angular_states.contains(i))
            .map(|(r, _)| r)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Pendulum(Pendulum),
    Lorenz(LorenzConfig),
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Pendulum(_) => "pendulum",
            Model::Lorenz(_) => "lorenz",
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Model::Pendulum(p) => p.dt,
            Model::Lorenz(c) => c.dt,
        }
    }

    /// Same family with a different sampling interval.
    pub fn with_dt(self, dt: f64) -> Self {
        match self {
            Model::Pendulum(p) => Model::Pendulum(Pendulum { dt, ..p }),
            Model::Lorenz(c) => Model::Lorenz(LorenzConfig { dt, ..c }),
        }
    }
}

impl Dynamics for Model {
    fn dim(&self) -> usize {
        match self {
            Model::Pendulum(p) => p.dim(),
            Model::Lorenz(c) => c.dim(),
        }
    }

    fn evolve(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Model::Pendulum(p) => p.evolve(x, out),
            Model::Lorenz(c) => c.evolve(x, out),
        }
    }

    fn jacobian(&self, x: &[f64], jac: &mut [f64]) {
        match self {
            Model::Pendulum(p) => p.jacobian(x, jac),
            Model::Lorenz(c) => c.jacobian(x, jac),
        }
    }

    fn angular(&self) -> &[usize] {
        match self {
            Model::Pendulum(p) => p.angular(),
            Model::Lorenz(c) => c.angular(),
        }
    }
}

/// The partially known model handed to filters: dynamics, sensing,
/// selection of observable coordinates and noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsModelSpec {
    pub model: Model,
    pub sensor: Sensor,
    pub selection: SelectionMatrix,
    /// Process-noise variance, `Q = q²·I`.
    pub q2: f64,
    pub obs_noise: ObservationNoise,
}

impl SsModelSpec {
    /// Pendulum with rod images and Gaussian pixel noise at the given level
    /// (`−10·log10 r²`). Only the angle is observable.
    pub fn pendulum(noise_level: f64) -> Self {
        Self {
            model: Model::Pendulum(Pendulum::default()),
            sensor: Sensor::Rod { height: 28, width: 28 },
            selection: SelectionMatrix::new(vec![0], 2).expect("valid selection"),
            q2: 0.1,
            obs_noise: ObservationNoise::gaussian_from_level(noise_level),
        }
    }

    /// Lorenz attractor with point-spread images and salt-and-pepper noise
    /// at the given level (`−log10 p_r`). Fully observable.
    pub fn lorenz(noise_level: f64, cfg: LorenzConfig) -> Self {
        Self {
            model: Model::Lorenz(cfg),
            sensor: Sensor::Psf {
                height: 28,
                width: 28,
                viewport: Viewport::lorenz(),
            },
            selection: SelectionMatrix::identity(3),
            q2: 0.005,
            obs_noise: ObservationNoise::salt_and_pepper_from_level(noise_level),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.selection.m() != self.m() {
            return Err(Error::Dimension {
                what: "selection columns",
                expected: self.m(),
                got: self.selection.m(),
            });
        }
        if !(self.q2 >= 0.0 && self.q2.is_finite()) {
            return Err(Error::Config(format!("process noise variance {}", self.q2)));
        }
        if let Model::Lorenz(c) = self.model {
            c.validate()?;
        }
        self.obs_noise.validate()
    }

    pub fn m(&self) -> usize {
        self.model.dim()
    }

    pub fn n(&self) -> usize {
        self.sensor.n()
    }

    pub fn p(&self) -> usize {
        self.selection.p()
    }

    pub fn angular(&self) -> &[usize] {
        self.model.angular()
    }

    pub fn evolve(&self, x: &StateVector) -> Result<StateVector> {
        check_len(x, self.m())?;
        let mut out = vec![0.0; self.m()];
        self.model.evolve(x.as_slice(), &mut out);
        StateVector::new(out)
    }

    pub fn sense(&self, x: &StateVector) -> Result<ObservationFrame> {
        check_len(x, self.m())?;
        let mut px = vec![0.0; self.n()];
        self.sensor.render_into(x.as_slice(), &mut px)?;
        let (h, w) = self.sensor.dims();
        ObservationFrame::new(px, h, w)
    }

    /// Draw `x_{t+1} = f(x_t) + e_t` into `out`.
    pub fn step_noisy<R: Rng + ?Sized>(&self, x: &[f64], out: &mut [f64], rng: &mut R) {
        self.model.evolve(x, out);
        add_gaussian(out, self.q2, rng);
    }
}

pub(crate) fn check_len(x: &StateVector, m: usize) -> Result<()> {
    if x.len() != m {
        return Err(Error::Dimension {
            what: "state length",
            expected: m,
            got: x.len(),
        });
    }
    Ok(())
}

pub(crate) fn add_gaussian<R: Rng + ?Sized>(x: &mut [f64], var: f64, rng: &mut R) {
    if var > 0.0 {
        let sd = var.sqrt();
        for v in x {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            *v += sd * e;
        }
    }
}

/// Map the angular coordinates of a residual into `(−π, π]`.
pub fn wrap_residual(r: &mut [f64], angular: &[usize]) {
    for &i in angular {
        r[i] = latentkf_autodiff::wrap_angle(r[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_extracts_coordinates() {
        let p = SelectionMatrix::new(vec![0], 2).unwrap();
        assert_eq!(p.apply(&[0.7, -3.0]), vec![0.7]);
        let h = p.matrix();
        assert_eq!((h.nrows(), h.ncols()), (1, 2));
        assert_eq!(h[(0, 0)], 1.0);
        assert_eq!(h[(0, 1)], 0.0);
        let i = SelectionMatrix::identity(3);
        assert_eq!(i.apply(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn selection_rejects_repeats_and_overflow() {
        assert!(SelectionMatrix::new(vec![0, 0], 2).is_err());
        assert!(SelectionMatrix::new(vec![2], 2).is_err());
        assert!(SelectionMatrix::new(vec![0, 1, 2], 2).is_err());
    }

    #[test]
    fn state_vector_rejects_non_finite() {
        assert!(matches!(StateVector::new(vec![0.0, f64::NAN]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn spec_dimensions() {
        let p = SsModelSpec::pendulum(23.0);
        assert_eq!((p.m(), p.n(), p.p()), (2, 784, 1));
        p.validate().unwrap();
        let l = SsModelSpec::lorenz(2.0, LorenzConfig::default());
        assert_eq!((l.m(), l.n(), l.p()), (3, 784, 3));
        l.validate().unwrap();
        let x = StateVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(l.evolve(&x).unwrap().len(), 3);
        assert_eq!(l.sense(&x).unwrap().pixels.len(), 784);
        assert!(p.evolve(&x).is_err());
    }

    #[test]
    fn numerical_jacobian_of_linear_map() {
        struct Lin;
        impl Dynamics for Lin {
            fn dim(&self) -> usize {
                2
            }
            fn evolve(&self, x: &[f64], out: &mut [f64]) {
                out[0] = 2.0 * x[0] - x[1];
                out[1] = 0.5 * x[1];
            }
            fn jacobian(&self, _: &[f64], _: &mut [f64]) {}
        }
        let mut j = [0.0; 4];
        numerical_jacobian(&Lin, &[0.3, 0.1], 1e-6, &mut j);
        for (a, b) in j.iter().zip([2.0, -1.0, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Dynamics, StateVector};
use crate::error::{Error, Result};

/// Truncated-Taylor discretization of the Lorenz system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzConfig {
    /// Number of series terms after the identity.
    pub j: usize,
    pub dt: f64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self { j: 5, dt: 0.02 }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j == 0 {
            return Err(Error::Config("Taylor order must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// State-dependent system matrix with `ẋ = A(x)·x`.
pub fn lorenz_system_matrix(x1: f64) -> Matrix3<f64> {
    Matrix3::new(-10.0, 10.0, 0.0, 28.0, -1.0, -x1, 0.0, x1, -8.0 / 3.0)
}

/// `F(x) = I + Σ_{j=1..J} (A(x)·dt)^j / j!`.
pub fn lorenz_transition_matrix(x: &StateVector, cfg: LorenzConfig) -> Result<Matrix3<f64>> {
    check(x, cfg)?;
    Ok(transition(x.as_slice()[0], cfg))
}

/// `F(x)·x`.
pub fn lorenz_evolve(x: &StateVector, cfg: LorenzConfig) -> Result<StateVector> {
    check(x, cfg)?;
    let mut out = vec![0.0; 3];
    cfg.evolve(x.as_slice(), &mut out);
    StateVector::new(out)
}

fn check(x: &StateVector, cfg: LorenzConfig) -> Result<()> {
    cfg.validate()?;
    if x.len() != 3 {
        return Err(Error::Dimension {
            what: "Lorenz state",
            expected: 3,
            got: x.len(),
        });
    }
    Ok(())
}

fn transition(x1: f64, cfg: LorenzConfig) -> Matrix3<f64> {
    let a = lorenz_system_matrix(x1) * cfg.dt;
    let mut term = Matrix3::identity();
    let mut f = Matrix3::identity();
    for j in 1..=cfg.j {
        term = term * a / j as f64;
        f += term;
    }
    f
}

impl Dynamics for LorenzConfig {
    fn dim(&self) -> usize {
        3
    }

    fn evolve(&self, x: &[f64], out: &mut [f64]) {
        let y = transition(x[0], *self) * Vector3::new(x[0], x[1], x[2]);
        out.copy_from_slice(y.as_slice());
    }

    /// `∂(F(x)x)/∂x = F(x) + (∂F/∂x1)·x·e1ᵀ`. Only `x1` enters `A`, with
    /// `∂A/∂x1 = E`; the series is differentiated termwise through
    /// `∂A^j = ∂A^{j−1}·A + A^{j−1}·E`.
    fn jacobian(&self, x: &[f64], jac: &mut [f64]) {
        let a = lorenz_system_matrix(x[0]);
        let e = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let mut pow = Matrix3::identity();
        let mut dpow = Matrix3::zeros();
        let mut f = Matrix3::identity();
        let mut df = Matrix3::zeros();
        let mut coef = 1.0;
        for j in 1..=self.j {
            dpow = dpow * a + pow * e;
            pow *= a;
            coef *= self.dt / j as f64;
            f += pow * coef;
            df += dpow * coef;
        }
        let col = df * Vector3::new(x[0], x[1], x[2]);
        for r in 0..3 {
            for c in 0..3 {
                jac[r * 3 + c] = f[(r, c)] + if c == 0 { col[r] } else { 0.0 };
            }
        }
    }
}

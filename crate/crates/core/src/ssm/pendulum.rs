use serde::{Deserialize, Serialize};

use super::{Dynamics, StateVector};
use crate::error::{Error, Result};

/// Discretized pendulum with state `[φ, ω]`, angle measured from the
/// downward vertical.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pendulum {
    pub dt: f64,
    pub g_over_l: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            dt: 0.05,
            g_over_l: 9.81,
        }
    }
}

/// One noise-free step:
/// `[φ + dt·ω − (g/ℓ)(dt²/2)·sin φ, ω − (g/ℓ)·dt·sin φ]`.
pub fn pendulum_evolve(x: &StateVector, dt: f64, g_over_l: f64) -> Result<StateVector> {
    if x.len() != 2 {
        return Err(Error::Dimension {
            what: "pendulum state",
            expected: 2,
            got: x.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let mut out = vec![0.0; 2];
    Pendulum { dt, g_over_l }.evolve(x.as_slice(), &mut out);
    StateVector::new(out)
}

/// Mechanical energy per unit `mℓ²`: `½ω² − (g/ℓ)·cos φ`.
pub fn pendulum_energy(x: &[f64], g_over_l: f64) -> f64 {
    0.5 * x[1] * x[1] - g_over_l * x[0].cos()
}

impl Dynamics for Pendulum {
    fn dim(&self) -> usize {
        2
    }

    fn evolve(&self, x: &[f64], out: &mut [f64]) {
        let (phi, omega) = (x[0], x[1]);
        let s = phi.sin();
        out[0] = phi + self.dt * omega - self.g_over_l * 0.5 * self.dt * self.dt * s;
        out[1] = omega - self.g_over_l * self.dt * s;
    }

    fn jacobian(&self, x: &[f64], jac: &mut [f64]) {
        let c = x[0].cos();
        jac[0] = 1.0 - self.g_over_l * 0.5 * self.dt * self.dt * c;
        jac[1] = self.dt;
        jac[2] = -self.g_over_l * self.dt * c;
        jac[3] = 1.0;
    }

    fn angular(&self) -> &[usize] {
        &[0]
    }
}

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ssm::{numerical_jacobian, Dynamics};

#[derive(Clone, Debug, PartialEq)]
pub struct EkfState {
    pub x: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl EkfState {
    pub fn new(x: &[f64], cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != x.len() || cov.ncols() != x.len() {
            return Err(Error::Dimension {
                what: "EKF covariance",
                expected: x.len(),
                got: cov.nrows(),
            });
        }
        Ok(Self {
            x: DVector::from_column_slice(x),
            cov,
        })
    }
}

/// One-step prediction `x̂_{t|t−1}`, `Σ̂_{t|t−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub x: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JacobianMode {
    Analytic,
    /// Central differences with the given step.
    Numerical { step: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    pub gain: DMatrix<f64>,
    /// The innovation covariance needed a ridge to be inverted.
    pub regularized: bool,
    /// Inversion failed even with the ridge; the prediction was kept.
    pub skipped: bool,
}

pub fn ekf_predict(state: &EkfState, f: &dyn Dynamics, q: &DMatrix<f64>, mode: JacobianMode) -> Result<Prediction> {
    let m = f.dim();
    if state.x.len() != m {
        return Err(Error::Dimension {
            what: "EKF state",
            expected: m,
            got: state.x.len(),
        });
    }
    let mut x = DVector::zeros(m);
    f.evolve(state.x.as_slice(), x.as_mut_slice());
    let mut jac = vec![0.0; m * m];
    match mode {
        JacobianMode::Analytic => f.jacobian(state.x.as_slice(), &mut jac),
        JacobianMode::Numerical { step } => numerical_jacobian(f, state.x.as_slice(), step, &mut jac),
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state-evolution Jacobian".into()));
    }
    let fj = DMatrix::from_row_slice(m, m, &jac);
    let cov = &fj * &state.cov * fj.transpose() + q;
    Ok(Prediction { x, cov: symmetrize(cov) })
}

/// Measurement update with a linear observation `H`. Innovations in
/// `angular_rows` are wrapped onto `(−π, π]`.
pub fn ekf_update(
    pred: &Prediction,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    angular_rows: &[usize],
) -> Result<(EkfState, UpdateReport)> {
    let (p, m) = (h.nrows(), h.ncols());
    if z.len() != p || r.nrows() != p || pred.x.len() != m {
        return Err(Error::Dimension {
            what: "EKF update",
            expected: p,
            got: z.len(),
        });
    }
    let hs = h * &pred.cov;
    let s = symmetrize(&hs * h.transpose() + r);
    let mut regularized = false;
    let chol = match s.clone().cholesky() {
        Some(c) => Some(c),
        None => {
            regularized = true;
            let ridge = 1e-9 * s.trace().abs().max(f64::MIN_POSITIVE) / p as f64;
            (s + DMatrix::identity(p, p) * ridge).cholesky()
        }
    };
    let Some(chol) = chol else {
        log::warn!("innovation covariance not invertible; keeping the prediction");
        return Ok((
            EkfState {
                x: pred.x.clone(),
                cov: pred.cov.clone(),
            },
            UpdateReport {
                gain: DMatrix::zeros(m, p),
                regularized,
                skipped: true,
            },
        ));
    };
    // K = Σ Hᵀ S⁻¹ = (S⁻¹ H Σ)ᵀ since Σ and S are symmetric
    let gain = chol.solve(&hs).transpose();
    let mut innov = z - h * &pred.x;
    for &i in angular_rows {
        innov[i] = latentkf_autodiff::wrap_angle(innov[i]);
    }
    let x = &pred.x + &gain * innov;
    let cov = covariance_update_joseph(&pred.cov, &gain, h, r);
    Ok((
        EkfState { x, cov },
        UpdateReport {
            gain,
            regularized,
            skipped: false,
        },
    ))
}

/// `(I − KH) Σ (I − KH)ᵀ + K R Kᵀ`.
pub fn covariance_update_joseph(cov: &DMatrix<f64>, k: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let m = cov.nrows();
    let a = DMatrix::identity(m, m) - k * h;
    symmetrize(&a * cov * a.transpose() + k * r * k.transpose())
}

/// `(I − KH) Σ`.
pub fn covariance_update_standard(cov: &DMatrix<f64>, k: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let m = cov.nrows();
    symmetrize((DMatrix::identity(m, m) - k * h) * cov)
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Walk(usize);

    impl Dynamics for Walk {
        fn dim(&self) -> usize {
            self.0
        }
        fn evolve(&self, x: &[f64], out: &mut [f64]) {
            out.copy_from_slice(x);
        }
        fn jacobian(&self, _: &[f64], jac: &mut [f64]) {
            jac.fill(0.0);
            for i in 0..self.0 {
                jac[i * self.0 + i] = 1.0;
            }
        }
    }

    #[test]
    fn identity_dynamics_adds_q() {
        let st = EkfState::new(&[1.0, -2.0], DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let q = DMatrix::identity(2, 2) * 0.3;
        let p = ekf_predict(&st, &Walk(2), &q, JacobianMode::Analytic).unwrap();
        assert_eq!(p.x, st.x);
        assert!((p.cov - (&st.cov + &q)).norm() < 1e-15);
    }

    #[test]
    fn scalar_riccati_fixed_point() {
        let mut st = EkfState::new(&[0.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        let (mut prior, mut gain) = (0.0, 0.0);
        for _ in 0..60 {
            let p = ekf_predict(&st, &Walk(1), &one, JacobianMode::Analytic).unwrap();
            prior = p.cov[(0, 0)];
            let (s, rep) = ekf_update(&p, &DVector::from_element(1, 0.0), &one, &one, &[]).unwrap();
            gain = rep.gain[(0, 0)];
            st = s;
        }
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((prior - phi).abs() < 1e-6);
        assert!((gain - (phi - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn huge_noise_keeps_prediction() {
        let p = Prediction {
            x: DVector::from_column_slice(&[1.0, 2.0]),
            cov: DMatrix::identity(2, 2),
        };
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = DMatrix::from_element(1, 1, 1e12);
        let (st, rep) = ekf_update(&p, &DVector::from_element(1, 50.0), &h, &r, &[]).unwrap();
        assert!(rep.gain.norm() < 1e-11);
        assert!((st.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_observation_snaps_to_z() {
        let st = EkfState::new(&[0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let p = ekf_predict(&st, &Walk(2), &DMatrix::zeros(2, 2), JacobianMode::Analytic).unwrap();
        let h = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2) * 1e-14;
        let z = DVector::from_column_slice(&[3.0, -4.0]);
        let (s, _) = ekf_update(&p, &z, &h, &r, &[]).unwrap();
        assert!((s.x - z).norm() < 1e-10);
    }

    #[test]
    fn singular_innovation_gets_ridge() {
        let p = Prediction {
            x: DVector::from_column_slice(&[0.0, 0.0]),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        };
        let h = DMatrix::identity(2, 2);
        let (st, rep) = ekf_update(&p, &DVector::from_column_slice(&[1.0, 1.0]), &h, &DMatrix::zeros(2, 2), &[]).unwrap();
        assert!(rep.regularized && !rep.skipped);
        assert!(st.x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn angular_innovation_is_wrapped() {
        let p = Prediction {
            x: DVector::from_column_slice(&[3.0]),
            cov: DMatrix::from_element(1, 1, 1.0),
        };
        let one = DMatrix::from_element(1, 1, 1.0);
        let z = DVector::from_element(1, -3.0);
        let (st, _) = ekf_update(&p, &z, &one, &one, &[0]).unwrap();
        // −3 − 3 wraps to 2π − 6 ≈ 0.283, half of it is applied
        assert!((st.x[0] - (3.0 + 0.5 * (2.0 * std::f64::consts::PI - 6.0))).abs() < 1e-12);
    }
}

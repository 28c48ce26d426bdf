use nalgebra::{DMatrix, DVector};

use super::ekf::{ekf_predict, ekf_update, EkfState, JacobianMode};
use crate::error::{Error, Result};
use crate::ssm::{Dynamics, SelectionMatrix};

/// Anything that turns a frame, given the predicted state, into a latent
/// observation of the selected coordinates.
pub trait LatentSource {
    fn latent_dim(&self) -> usize;
    fn latent(&self, frame: &[f32], prior: &[f64], out: &mut [f64]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentEkfConfig {
    /// Latent process-noise variance, `Q = q²·I`.
    pub q2: f64,
    /// Latent observation-noise covariance.
    pub r: DMatrix<f64>,
    /// Initial covariance `σ0·I`.
    pub sigma0: f64,
    pub jacobian: JacobianMode,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentEkfRun {
    /// `T × m`, row 0 is the initial estimate.
    pub estimates: Vec<f64>,
    pub regularized_steps: usize,
    pub skipped_steps: usize,
}

/// Cascade of a latent source and an EKF with `H = P`: per step predict
/// through `f`, ask the source for `z_t` given the prediction, update.
pub fn latent_ekf_run(
    f: &dyn Dynamics,
    source: &dyn LatentSource,
    frames: &[f32],
    frame_len: usize,
    selection: &SelectionMatrix,
    x0_hat: &[f64],
    cfg: &LatentEkfConfig,
) -> Result<LatentEkfRun> {
    let (m, p) = (f.dim(), selection.p());
    if source.latent_dim() != p || cfg.r.nrows() != p || x0_hat.len() != m {
        return Err(Error::Dimension {
            what: "latent EKF",
            expected: p,
            got: source.latent_dim(),
        });
    }
    if frame_len == 0 || frames.len() % frame_len != 0 {
        return Err(Error::Dimension {
            what: "frame sequence",
            expected: frame_len,
            got: frames.len(),
        });
    }
    let steps = frames.len() / frame_len;
    let h = selection.matrix();
    let q = DMatrix::identity(m, m) * cfg.q2;
    let angular = selection.angular_rows(f.angular());
    let mut state = EkfState::new(x0_hat, DMatrix::identity(m, m) * cfg.sigma0)?;
    let mut run = LatentEkfRun {
        estimates: Vec::with_capacity(steps * m),
        ..Default::default()
    };
    run.estimates.extend_from_slice(x0_hat);
    let mut z = DVector::zeros(p);
    for frame in frames.chunks_exact(frame_len).skip(1) {
        let pred = ekf_predict(&state, f, &q, cfg.jacobian)?;
        source.latent(frame, pred.x.as_slice(), z.as_mut_slice())?;
        let (next, rep) = ekf_update(&pred, &z, &h, &cfg.r, &angular)?;
        run.regularized_steps += rep.regularized as usize;
        run.skipped_steps += rep.skipped as usize;
        run.estimates.extend_from_slice(next.x.as_slice());
        state = next;
    }
    Ok(run)
}

/// Prior-fed encoder without a filter: per step predict through `f`, ask
/// the source for `z_t` given the prediction and overwrite the observable
/// coordinates of the prediction with it. Unobservable coordinates are
/// dead-reckoned. Returns `T × m` estimates, row 0 is `x̂_0`.
pub fn prior_fed_run(
    f: &dyn Dynamics,
    source: &dyn LatentSource,
    frames: &[f32],
    frame_len: usize,
    selection: &SelectionMatrix,
    x0_hat: &[f64],
) -> Result<Vec<f64>> {
    let m = f.dim();
    if source.latent_dim() != selection.p() || x0_hat.len() != m {
        return Err(Error::Dimension {
            what: "prior-fed encoder",
            expected: selection.p(),
            got: source.latent_dim(),
        });
    }
    if frame_len == 0 || frames.len() % frame_len != 0 {
        return Err(Error::Dimension {
            what: "frame sequence",
            expected: frame_len,
            got: frames.len(),
        });
    }
    let mut out = Vec::with_capacity(frames.len() / frame_len * m);
    out.extend_from_slice(x0_hat);
    let mut x = x0_hat.to_vec();
    let mut prior = vec![0.0; m];
    let mut z = vec![0.0; selection.p()];
    for frame in frames.chunks_exact(frame_len).skip(1) {
        f.evolve(&x, &mut prior);
        source.latent(frame, &prior, &mut z)?;
        x.copy_from_slice(&prior);
        for (j, &i) in selection.indices().iter().enumerate() {
            x[i] = z[j];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior-fed estimate".into()));
        }
        out.extend_from_slice(&x);
    }
    Ok(out)
}

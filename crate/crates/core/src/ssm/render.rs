use serde::{Deserialize, Serialize};

use super::{ObservationFrame, StateVector};
use crate::error::{Error, Result};

/// Peak intensity of the point-spread blob.
pub const PSF_PEAK: f32 = 10.0;

/// Affine map from Lorenz coordinates to pixel-grid coordinates and blob
/// variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub scale: [f64; 2],
    pub offset: [f64; 2],
    pub var_gain: f64,
    pub var_floor: f64,
}

impl Viewport {
    /// Maps `x1 ∈ ±25` and `x2 ∈ ±30` onto `[2, 25]` of a 28-pixel grid.
    pub fn lorenz() -> Self {
        Self {
            scale: [11.5 / 25.0, 11.5 / 30.0],
            offset: [13.5, 13.5],
            var_gain: 0.15,
            var_floor: 1.0,
        }
    }

    pub fn apply(&self, x: &[f64]) -> [f64; 3] {
        [
            self.scale[0] * x[0] + self.offset[0],
            self.scale[1] * x[1] + self.offset[1],
            self.var_gain * x[2].abs() + self.var_floor,
        ]
    }
}

/// How states become images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sensor {
    /// Pendulum rod seen from the front.
    Rod { height: usize, width: usize },
    /// Gaussian blob whose center and variance follow the state through a
    /// viewport.
    Psf {
        height: usize,
        width: usize,
        viewport: Viewport,
    },
}

impl Sensor {
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            Sensor::Rod { height, width } | Sensor::Psf { height, width, .. } => (height, width),
        }
    }

    pub fn n(&self) -> usize {
        let (h, w) = self.dims();
        h * w
    }

    /// Factor that brings pixel intensities to roughly `[0, 1]`.
    pub fn input_scale(&self) -> f32 {
        match self {
            Sensor::Rod { .. } => 1.0,
            Sensor::Psf { .. } => 1.0 / PSF_PEAK,
        }
    }

    pub fn render_into(&self, x: &[f64], out: &mut [f32]) -> Result<()> {
        match *self {
            Sensor::Rod { height, width } => {
                rod(x[0], height, width, out);
                Ok(())
            }
            Sensor::Psf { height, width, viewport } => psf(viewport.apply(x), height, width, out),
        }
    }
}

/// Blob image with pixel at grid coordinate `c = (col, row)` equal to
/// `10·exp(−‖c − (x1, x2)‖² / (2·x3))`.
pub fn render_psf(x: &StateVector, height: usize, width: usize) -> Result<ObservationFrame> {
    let s = x.as_slice();
    if s.len() != 3 {
        return Err(Error::Dimension {
            what: "point-spread state",
            expected: 3,
            got: s.len(),
        });
    }
    let mut px = vec![0.0; height * width];
    psf([s[0], s[1], s[2]], height, width, &mut px)?;
    ObservationFrame::new(px, height, width)
}

fn psf(c: [f64; 3], height: usize, width: usize, out: &mut [f32]) -> Result<()> {
    let var = c[2];
    if !(var > 0.0) {
        return Err(Error::DegenerateSpread(var));
    }
    let k = -0.5 / var;
    // separable: exp(a + b) = exp(a)·exp(b)
    let gx: Vec<f64> = (0..width).map(|j| (k * (j as f64 - c[0]).powi(2)).exp()).collect();
    for (i, row) in out.chunks_mut(width).take(height).enumerate() {
        let gy = PSF_PEAK as f64 * (k * (i as f64 - c[1]).powi(2)).exp();
        for (p, g) in row.iter_mut().zip(&gx) {
            *p = (gy * g) as f32;
        }
    }
    Ok(())
}

/// Rod image of a pendulum at angle `φ` (from the downward vertical). The
/// pivot sits at `(W/2, H/4)` in continuous image coordinates, where pixel
/// `(row i, col j)` has its center at `(j + ½, i + ½)`; the rod is
/// `0.8·W/2` long and drawn with a unit-peak Gaussian profile of width
/// one pixel.
pub fn render_pendulum(x: &StateVector, height: usize, width: usize) -> Result<ObservationFrame> {
    if x.is_empty() {
        return Err(Error::Dimension {
            what: "pendulum state",
            expected: 2,
            got: 0,
        });
    }
    let mut px = vec![0.0; height * width];
    rod(x.as_slice()[0], height, width, &mut px);
    ObservationFrame::new(px, height, width)
}

fn rod(phi: f64, height: usize, width: usize, out: &mut [f32]) {
    let (px, py) = (width as f64 / 2.0, height as f64 / 4.0);
    let len = 0.8 * width as f64 / 2.0;
    let (dx, dy) = (phi.sin(), phi.cos());
    for (i, row) in out.chunks_mut(width).take(height).enumerate() {
        for (j, p) in row.iter_mut().enumerate() {
            let (rx, ry) = (j as f64 + 0.5 - px, i as f64 + 0.5 - py);
            let t = (rx * dx + ry * dy).clamp(0.0, len);
            let d2 = (rx - t * dx).powi(2) + (ry - t * dy).powi(2);
            *p = (-0.5 * d2).exp() as f32;
        }
    }
}

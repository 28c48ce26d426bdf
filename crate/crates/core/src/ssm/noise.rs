use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ObservationFrame, PSF_PEAK};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationNoise {
    /// Additive i.i.d. pixel noise of variance `r2`.
    Gaussian { r2: f64 },
    /// Each pixel independently replaced, with probability `p_r`, by `0` or
    /// `amplitude` (equally likely).
    SaltAndPepper { p_r: f64, amplitude: f64 },
}

impl ObservationNoise {
    /// Level on the `−10·log10(r²)` axis.
    pub fn gaussian_from_level(level: f64) -> Self {
        ObservationNoise::Gaussian {
            r2: 10f64.powf(-level / 10.0),
        }
    }

    /// Level on the `−log10(p_r)` axis.
    pub fn salt_and_pepper_from_level(level: f64) -> Self {
        ObservationNoise::SaltAndPepper {
            p_r: 10f64.powf(-level),
            amplitude: PSF_PEAK as f64,
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            ObservationNoise::Gaussian { r2 } => -10.0 * r2.log10(),
            ObservationNoise::SaltAndPepper { p_r, .. } => -p_r.log10(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ObservationNoise::Gaussian { r2 } if r2 > 0.0 && r2.is_finite() => Ok(()),
            ObservationNoise::SaltAndPepper { p_r, amplitude } if p_r > 0.0 && p_r < 1.0 && amplitude.is_finite() => {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid observation noise {other:?}"))),
        }
    }
}

pub fn apply_noise<R: Rng + ?Sized>(frame: &ObservationFrame, noise: ObservationNoise, rng: &mut R) -> ObservationFrame {
    let mut out = frame.clone();
    apply_noise_in_place(&mut out.pixels, noise, rng);
    out
}

pub fn apply_noise_in_place<R: Rng + ?Sized>(pixels: &mut [f32], noise: ObservationNoise, rng: &mut R) {
    match noise {
        ObservationNoise::Gaussian { r2 } => {
            let dist = Normal::new(0.0, r2.max(0.0).sqrt()).expect("finite variance");
            for p in pixels {
                *p += dist.sample(rng) as f32;
            }
        }
        ObservationNoise::SaltAndPepper { p_r, amplitude } => {
            for p in pixels {
                if rng.random::<f64>() < p_r {
                    *p = if rng.random::<bool>() { amplitude as f32 } else { 0.0 };
                }
            }
        }
    }
}

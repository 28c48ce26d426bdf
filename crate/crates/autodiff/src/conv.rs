//! im2col convolution kernels.

use crate::par::{self, ExecMode};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output side length `floor((in + 2·pad − k)/stride) + 1`.
pub fn output_side(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] {
            return None;
        }
        let kernel = w[2];
        Some(Self {
            batch: x[0],
            in_channels: x[1],
            height: x[2],
            width: x[3],
            out_channels: w[0],
            kernel,
            stride,
            padding,
            out_height: output_side(x[2], kernel, stride, padding)?,
            out_width: output_side(x[3], kernel, stride, padding)?,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Unfold one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` column matrix.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let np = self.positions();
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for oy in 0..self.out_height {
                        let iy = (oy * s) as isize - p + ky as isize;
                        for ox in 0..self.out_width {
                            let ix = (ox * s) as isize - p + kx as isize;
                            dst[oy * self.out_width + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width
                            {
                                img[(c * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let np = self.positions();
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * np..(row + 1) * np];
                    for oy in 0..self.out_height {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_width {
                            let ix = (ox * s) as isize - p + kx as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            img[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                src[oy * self.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    exec: ExecMode,
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (o, kk, np) = (geom.out_channels, geom.patch(), geom.positions());
    let mut out = vec![T::zero(); geom.batch * o * np];
    par::for_each_chunk_mut(exec, &mut out, o * np, |b, dst| {
        let mut cols = vec![T::zero(); kk * np];
        geom.im2col(&x[b * geom.image_len()..(b + 1) * geom.image_len()], &mut cols);
        if let Some(bias) = bias {
            for (oc, row) in dst.chunks_mut(np).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[oc]);
            }
        }
        T::gemm(
            o,
            kk,
            np,
            T::one(),
            w,
            kk as isize,
            1,
            &cols,
            np as isize,
            1,
            T::one(),
            dst,
            np as isize,
            1,
        );
    });
    out
}

/// Returns `(∂x, ∂w)` for the requested operands.
pub(crate) fn backward<T: Real>(
    exec: ExecMode,
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (o, kk, np, il) = (geom.out_channels, geom.patch(), geom.positions(), geom.image_len());
    let mut gw = need_w.then(|| vec![T::zero(); o * kk]);
    if let Some(gw) = gw.as_mut() {
        let mut cols = vec![T::zero(); kk * np];
        for b in 0..geom.batch {
            geom.im2col(&x[b * il..(b + 1) * il], &mut cols);
            // gw += gy_b · colsᵀ
            T::gemm(
                o,
                np,
                kk,
                T::one(),
                &gy[b * o * np..(b + 1) * o * np],
                np as isize,
                1,
                &cols,
                1,
                np as isize,
                T::one(),
                gw,
                kk as isize,
                1,
            );
        }
    }
    let gx = need_x.then(|| {
        let mut gx = vec![T::zero(); geom.batch * il];
        par::for_each_chunk_mut(exec, &mut gx, il, |b, dst| {
            let mut dcols = vec![T::zero(); kk * np];
            // dcols = wᵀ · gy_b
            T::gemm(
                kk,
                o,
                np,
                T::one(),
                w,
                1,
                kk as isize,
                &gy[b * o * np..(b + 1) * o * np],
                np as isize,
                1,
                T::zero(),
                &mut dcols,
                np as isize,
                1,
            );
            geom.col2im(&dcols, dst);
        });
        gx
    });
    (gx, gw)
}

pub(crate) fn bias_grad<T: Real>(geom: &ConvGeom, gy: &[T]) -> Vec<T> {
    let np = geom.positions();
    let mut gb = vec![T::zero(); geom.out_channels];
    for (i, row) in gy.chunks(np).enumerate() {
        gb[i % geom.out_channels] += row.iter().copied().sum::<T>();
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_sides() {
        assert_eq!(output_side(28, 3, 2, 1), Some(14));
        assert_eq!(output_side(14, 3, 2, 1), Some(7));
        assert_eq!(output_side(7, 3, 2, 1), Some(4));
    }

    #[test]
    fn forward_matches_direct_sum() {
        let geom = ConvGeom::new(&[2, 2, 5, 4], &[3, 2, 3, 3], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let bias = [0.5, -1.0, 0.25];
        let y = forward(ExecMode::Sequential, &geom, &x, &w, Some(&bias));
        for b in 0..2 {
            for o in 0..3 {
                for oy in 0..geom.out_height {
                    for ox in 0..geom.out_width {
                        let mut acc = bias[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    acc += w[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x[((b * 2 + c) * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                        let got = y[((b * 3 + o) * geom.out_height + oy) * geom.out_width + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

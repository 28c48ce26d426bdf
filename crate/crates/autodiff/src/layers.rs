//! Parameterized building blocks. Each layer registers its tensors in a
//! [`ParamSet`] at construction and reads them through a [`Binding`] during
//! the forward pass.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::graph::{BatchStats, Graph, Var};
use crate::params::{Binding, ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

fn uniform_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = ps.add(&format!("{name}.weight"), uniform_tensor(&[fan_out, fan_in], bound, rng))?;
        let b = ps.add(&format!("{name}.bias"), uniform_tensor(&[fan_out], bound, rng))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Square-kernel 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let w = ps.add(
            &format!("{name}.weight"),
            uniform_tensor(&[out_channels, in_channels, kernel, kernel], bound, rng),
        )?;
        let b = ps.add(&format!("{name}.bias"), uniform_tensor(&[out_channels], bound, rng))?;
        Ok(Self { w, b, stride, padding })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.padding)
    }
}

/// Batch normalization over channel axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(&format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?,
            beta: ps.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: ps.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: ps.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode returns the batch statistics so the caller can fold
    /// them into the running estimates with [`BatchNorm::update_running`].
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        ps: &ParamSet<T>,
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        if train {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, T::lit(self.eps))?;
            Ok((y, Some(stats)))
        } else {
            let y = g.batch_norm_infer(
                x,
                gamma,
                beta,
                ps.get(self.running_mean).data(),
                ps.get(self.running_var).data(),
                T::lit(self.eps),
            )?;
            Ok((y, None))
        }
    }

    pub fn update_running<T: Real>(&self, ps: &mut ParamSet<T>, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        for (r, &b) in ps.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in ps.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

/// Gated recurrent cell:
///
/// ```text
/// r  = σ(W_r x + U_r h + b_r)
/// u  = σ(W_u x + U_u h + b_u)
/// n  = tanh(W_n x + b_n + r ⊙ (U_n h + c_n))
/// h' = (1 − u) ⊙ h + u ⊙ n
/// ```
///
/// With `u ≡ 1` and `r ≡ 1` the cell is the plain recurrence
/// `h' = tanh(W_n x + U_n h + b_n + c_n)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        Ok(Self {
            w_x: ps.add(&format!("{name}.w_x"), uniform_tensor(&[3 * hidden, input], bound, rng))?,
            w_h: ps.add(&format!("{name}.w_h"), uniform_tensor(&[3 * hidden, hidden], bound, rng))?,
            b_x: ps.add(&format!("{name}.b_x"), uniform_tensor(&[3 * hidden], bound, rng))?,
            b_h: ps.add(&format!("{name}.b_h"), uniform_tensor(&[3 * hidden], bound, rng))?,
            input,
            hidden,
        })
    }

    pub fn param_count(&self) -> usize {
        3 * self.hidden * (self.input + self.hidden + 2)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let gx = g.linear(x, p.var(self.w_x), Some(p.var(self.b_x)))?;
        let gh = g.linear(h, p.var(self.w_h), Some(p.var(self.b_h)))?;
        let cols = |k: usize| (k * hd..(k + 1) * hd).collect::<Vec<_>>();
        let (xr, xu, xn) = (g.select_cols(gx, &cols(0))?, g.select_cols(gx, &cols(1))?, g.select_cols(gx, &cols(2))?);
        let (hr, hu, hn) = (g.select_cols(gh, &cols(0))?, g.select_cols(gh, &cols(1))?, g.select_cols(gh, &cols(2))?);
        let r_pre = g.add(xr, hr)?;
        let r = g.sigmoid(r_pre);
        let u_pre = g.add(xu, hu)?;
        let u = g.sigmoid(u_pre);
        let rh = g.mul(r, hn)?;
        let n_pre = g.add(xn, rh)?;
        let n = g.tanh(n_pre);
        let diff = g.sub(n, h)?;
        let step = g.mul(u, diff)?;
        g.add(h, step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_with_open_gates_is_dense_tanh_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new("gru");
        let cell = GruCell::new(&mut ps, "c", 3, 4, &mut rng).unwrap();
        // Force r and u to one through large biases.
        for i in 0..8 {
            ps.get_mut(cell.b_x).data_mut()[i] = 60.0;
        }
        let x = Tensor::new(&[2, 3], vec![0.3, -0.2, 0.9, 1.1, 0.0, -0.4]);
        let h = Tensor::new(&[2, 4], vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.0, 0.2]);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let xv = g.constant(x.clone());
        let hv = g.constant(h.clone());
        let y = cell.forward(&mut g, &b, xv, hv).unwrap();
        // oracle: tanh(W_n x + b_n + U_n h + c_n)
        let wx = ps.get(cell.w_x).data();
        let wh = ps.get(cell.w_h).data();
        let bx = ps.get(cell.b_x).data();
        let bh = ps.get(cell.b_h).data();
        for bi in 0..2 {
            for j in 0..4 {
                let row = 8 + j;
                let mut a = bx[row] + bh[row];
                for k in 0..3 {
                    a += wx[row * 3 + k] * x.data()[bi * 3 + k];
                }
                for k in 0..4 {
                    a += wh[row * 4 + k] * h.data()[bi * 4 + k];
                }
                let got = g.value(y).data()[bi * 4 + j];
                assert!((got - a.tanh()).abs() < 1e-12, "{got} vs {}", a.tanh());
            }
        }
    }

    #[test]
    fn gru_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f32>::new("gru");
        let cell = GruCell::new(&mut ps, "c", 5, 7, &mut rng).unwrap();
        assert_eq!(ps.param_count(), cell.param_count());
    }

    #[test]
    fn batch_norm_running_update() {
        let mut ps = ParamSet::<f64>::new("bn");
        let bn = BatchNorm::new(&mut ps, "bn", 1).unwrap();
        bn.update_running(&mut ps, &BatchStats { mean: vec![2.0], var: vec![3.0] });
        assert!((ps.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((ps.get(bn.running_var).data()[0] - 1.2).abs() < 1e-12);
    }
}

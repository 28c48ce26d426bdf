//! Recurrent Kalman-gain network.
//!
//! Four per-step difference features drive three gated recurrent cells laid
//! out like the moment recursion of the Kalman filter: cell Q consumes the
//! state-evolution difference, cell Σ consumes cell Q and the update
//! difference, and cell S consumes an expansion of cell Σ together with the
//! observation difference and the innovation. A two-layer head over the Σ
//! and S hidden states emits the `m × p` gain (row-major).

use std::path::Path;

use latentkf_autodiff::{Binding, Dense, Graph, GruCell, ParamSet, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::adopt;
use crate::error::{Error, Result};
use crate::ssm::wrap_residual;

/// Added to feature norms before dividing.
pub const FEATURE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainNetArch {
    pub m: usize,
    pub p: usize,
    pub h_q: usize,
    pub h_sigma: usize,
    pub h_s: usize,
    pub head_hidden: usize,
    /// Angular state coordinates.
    pub angular_state: Vec<usize>,
    /// Angular latent coordinates.
    pub angular_latent: Vec<usize>,
    /// Bias of the output head, i.e. the gain emitted when the head weights
    /// vanish.
    pub init_gain: Vec<f64>,
}

impl GainNetArch {
    /// Widths `max(m², 8)`, `max(m², 8)`, `max(p², 8)`, head 32. The initial
    /// gain is `½·Pᵀ` for the selection `sel`.
    pub fn for_dims(m: usize, sel: &[usize], angular_state: &[usize], angular_latent: &[usize]) -> Self {
        let p = sel.len();
        let mut init_gain = vec![0.0; m * p];
        for (j, &i) in sel.iter().enumerate() {
            init_gain[i * p + j] = 0.5;
        }
        Self {
            m,
            p,
            h_q: (m * m).max(8),
            h_sigma: (m * m).max(8),
            h_s: (p * p).max(8),
            head_hidden: 32,
            angular_state: angular_state.to_vec(),
            angular_latent: angular_latent.to_vec(),
            init_gain,
        }
    }

    fn feature_widths(&self) -> [usize; 4] {
        [self.p + 1, self.p + 1, self.m + 1, self.m + 1]
    }

    /// Floating-point operations of one step (two per multiply-add).
    pub fn op_count(&self) -> usize {
        let [f1, f2, f3, f4] = self.feature_widths();
        let gru = |i: usize, h: usize| 3 * h * (i + h);
        let expand = self.p * self.p;
        let macs = gru(f4, self.h_q)
            + gru(self.h_q + f3, self.h_sigma)
            + self.h_sigma * expand
            + gru(expand + f1 + f2, self.h_s)
            + (self.h_sigma + self.h_s) * self.head_hidden
            + self.head_hidden * self.m * self.p
            + self.m * self.p;
        2 * macs
    }
}

/// Hidden states of the three cells.
#[derive(Clone, Copy, Debug)]
pub struct HiddenVars {
    pub q: Var,
    pub sigma: Var,
    pub s: Var,
}

/// Per-step inputs in graph form, each `[B, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs {
    pub z: Var,
    pub z_prev: Var,
    pub innovation: Var,
    pub prior: Var,
    pub x_prev: Var,
    pub prior_prev: Var,
}

pub struct GainNet<T: Real> {
    pub arch: GainNetArch,
    pub params: ParamSet<T>,
    gru_q: GruCell,
    gru_sigma: GruCell,
    expand: Dense,
    gru_s: GruCell,
    head1: Dense,
    head2: Dense,
}

impl<T: Real> Clone for GainNet<T> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.clone(),
            gru_q: self.gru_q.clone(),
            gru_sigma: self.gru_sigma.clone(),
            expand: self.expand.clone(),
            gru_s: self.gru_s.clone(),
            head1: self.head1.clone(),
            head2: self.head2.clone(),
        }
    }
}

impl<T: Real> GainNet<T> {
    pub fn new<R: Rng + ?Sized>(arch: GainNetArch, rng: &mut R) -> Result<Self> {
        if arch.m == 0 || arch.p == 0 || arch.init_gain.len() != arch.m * arch.p {
            return Err(Error::Config(format!("gain network for m={}, p={}", arch.m, arch.p)));
        }
        let [f1, f2, f3, f4] = arch.feature_widths();
        let mut ps = ParamSet::new("gain");
        let gru_q = GruCell::new(&mut ps, "gru_q", f4, arch.h_q, rng)?;
        let gru_sigma = GruCell::new(&mut ps, "gru_sigma", arch.h_q + f3, arch.h_sigma, rng)?;
        let expand = Dense::new(&mut ps, "expand", arch.h_sigma, arch.p * arch.p, rng)?;
        let gru_s = GruCell::new(&mut ps, "gru_s", arch.p * arch.p + f1 + f2, arch.h_s, rng)?;
        let head1 = Dense::new(&mut ps, "head1", arch.h_sigma + arch.h_s, arch.head_hidden, rng)?;
        let head2 = Dense::new(&mut ps, "head2", arch.head_hidden, arch.m * arch.p, rng)?;
        for v in ps.get_mut(head2.w).data_mut() {
            *v = *v * T::lit(0.1);
        }
        for (v, &g) in ps.get_mut(head2.b).data_mut().iter_mut().zip(&arch.init_gain) {
            *v = T::lit(g);
        }
        Ok(Self {
            arch,
            params: ps,
            gru_q,
            gru_sigma,
            expand,
            gru_s,
            head1,
            head2,
        })
    }

    pub fn from_params(arch: GainNetArch, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        adopt(&mut net.params, params)?;
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Zero hidden states for a batch of `b` rollouts.
    pub fn initial_hidden(&self, g: &mut Graph<T>, b: usize) -> HiddenVars {
        HiddenVars {
            q: g.constant(Tensor::zeros(&[b, self.arch.h_q])),
            sigma: g.constant(Tensor::zeros(&[b, self.arch.h_sigma])),
            s: g.constant(Tensor::zeros(&[b, self.arch.h_s])),
        }
    }

    /// The four normalized features, in the order observation difference,
    /// innovation, update difference, evolution difference.
    pub fn features(&self, g: &mut Graph<T>, inp: &StepInputs) -> Result<[Var; 4]> {
        let eps = T::lit(FEATURE_EPS);
        let a = &self.arch;
        let d1 = g.sub(inp.z, inp.z_prev)?;
        let d1 = g.wrap_angles(d1, &a.angular_latent)?;
        let d2 = g.wrap_angles(inp.innovation, &a.angular_latent)?;
        let d3 = g.sub(inp.x_prev, inp.prior_prev)?;
        let d3 = g.wrap_angles(d3, &a.angular_state)?;
        let d4 = g.sub(inp.prior, inp.x_prev)?;
        let d4 = g.wrap_angles(d4, &a.angular_state)?;
        Ok([
            g.row_normalize(d1, eps)?,
            g.row_normalize(d2, eps)?,
            g.row_normalize(d3, eps)?,
            g.row_normalize(d4, eps)?,
        ])
    }

    /// One recurrent step from the features. Returns the gain `[B, m·p]` and
    /// the new hidden states.
    pub fn forward(&self, g: &mut Graph<T>, b: &Binding, h: HiddenVars, f: [Var; 4]) -> Result<(Var, HiddenVars)> {
        let [f1, f2, f3, f4] = f;
        let q = self.gru_q.forward(g, b, f4, h.q)?;
        let sig_in = g.concat(&[q, f3])?;
        let sigma = self.gru_sigma.forward(g, b, sig_in, h.sigma)?;
        let e = self.expand.forward(g, b, sigma)?;
        let e = g.relu(e);
        let s_in = g.concat(&[e, f1, f2])?;
        let s = self.gru_s.forward(g, b, s_in, h.s)?;
        let hs = g.concat(&[sigma, s])?;
        let h1 = self.head1.forward(g, b, hs)?;
        let h1 = g.relu(h1);
        let k = self.head2.forward(g, b, h1)?;
        Ok((k, HiddenVars { q, sigma, s }))
    }

    pub fn runtime(&self) -> GainRuntime {
        GainRuntime::new(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "arch": self.arch });
        Ok(self.params.save(dir, meta)?)
    }
}

impl GainNet<f32> {
    pub fn load(dir: &Path) -> Result<Self> {
        let (ps, meta) = ParamSet::load(dir)?;
        let arch: GainNetArch = serde_json::from_value(meta["arch"].clone()).map_err(|e| Error::Format {
            field: "gain manifest meta.arch".into(),
            msg: e.to_string(),
        })?;
        Self::from_params(arch, ps)
    }
}

/// Dense weights in `f64`, row-major `[out, in]`.
#[derive(Clone, Debug)]
struct DenseW {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

impl DenseW {
    fn from<T: Real>(ps: &ParamSet<T>, w: latentkf_autodiff::ParamId, b: latentkf_autodiff::ParamId) -> Self {
        let wt = ps.get(w);
        let cvt = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>();
        Self {
            w: cvt(wt.data()),
            b: cvt(ps.get(b).data()),
            n_in: wt.shape()[1],
            n_out: wt.shape()[0],
        }
    }

    /// `out = W·x + b`, where `x` is the concatenation of `parts`.
    fn apply(&self, parts: &[&[f64]], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (o, row) in out.iter_mut().zip(self.w.chunks_exact(self.n_in)) {
            let mut acc = 0.0;
            let mut k = 0;
            for part in parts {
                for &x in *part {
                    acc += row[k] * x;
                    k += 1;
                }
            }
            *o += acc;
        }
    }
}

#[derive(Clone, Debug)]
struct GruW {
    x: DenseW,
    h: DenseW,
    gx: Vec<f64>,
    gh: Vec<f64>,
}

impl GruW {
    fn from<T: Real>(ps: &ParamSet<T>, c: &GruCell) -> Self {
        let x = DenseW::from(ps, c.w_x, c.b_x);
        let h = DenseW::from(ps, c.w_h, c.b_h);
        let (gx, gh) = (vec![0.0; x.n_out], vec![0.0; h.n_out]);
        Self { x, h, gx, gh }
    }

    fn step(&mut self, input: &[&[f64]], h: &mut [f64]) {
        let hd = h.len();
        self.x.apply(input, &mut self.gx);
        self.h.apply(&[h], &mut self.gh);
        for j in 0..hd {
            let r = sigmoid(self.gx[j] + self.gh[j]);
            let u = sigmoid(self.gx[hd + j] + self.gh[hd + j]);
            let n = (self.gx[2 * hd + j] + r * self.gh[2 * hd + j]).tanh();
            h[j] += u * (n - h[j]);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise `x / (‖x‖ + eps)` followed by `‖x‖`.
fn normalize_into(x: &[f64], out: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = n + FEATURE_EPS;
    for (o, v) in out.iter_mut().zip(x) {
        *o = v / r;
    }
    out[x.len()] = n;
}

/// Single-rollout gain network evaluated without a graph. Buffers are
/// allocated once; [`GainRuntime::step`] does not allocate.
#[derive(Clone, Debug)]
pub struct GainRuntime {
    arch: GainNetArch,
    gru_q: GruW,
    gru_sigma: GruW,
    expand: DenseW,
    gru_s: GruW,
    head1: DenseW,
    head2: DenseW,
    hq: Vec<f64>,
    hsigma: Vec<f64>,
    hs: Vec<f64>,
    diff_z: Vec<f64>,
    diff_x: Vec<f64>,
    f: [Vec<f64>; 4],
    e: Vec<f64>,
    h1: Vec<f64>,
}

impl GainRuntime {
    pub fn new<T: Real>(net: &GainNet<T>) -> Self {
        let a = net.arch.clone();
        let ps = &net.params;
        let [w1, w2, w3, w4] = a.feature_widths();
        Self {
            gru_q: GruW::from(ps, &net.gru_q),
            gru_sigma: GruW::from(ps, &net.gru_sigma),
            expand: DenseW::from(ps, net.expand.w, net.expand.b),
            gru_s: GruW::from(ps, &net.gru_s),
            head1: DenseW::from(ps, net.head1.w, net.head1.b),
            head2: DenseW::from(ps, net.head2.w, net.head2.b),
            hq: vec![0.0; a.h_q],
            hsigma: vec![0.0; a.h_sigma],
            hs: vec![0.0; a.h_s],
            diff_z: vec![0.0; a.p],
            diff_x: vec![0.0; a.m],
            f: [vec![0.0; w1], vec![0.0; w2], vec![0.0; w3], vec![0.0; w4]],
            e: vec![0.0; a.p * a.p],
            h1: vec![0.0; a.head_hidden],
            arch: a,
        }
    }

    pub fn arch(&self) -> &GainNetArch {
        &self.arch
    }

    /// Zero the hidden states.
    pub fn reset(&mut self) {
        self.hq.fill(0.0);
        self.hsigma.fill(0.0);
        self.hs.fill(0.0);
    }

    pub fn hidden_norm(&self) -> f64 {
        self.hq.iter().chain(&self.hsigma).chain(&self.hs).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// One step; writes the row-major `m × p` gain into `gain`.
    pub fn step(
        &mut self,
        z: &[f64],
        z_prev: &[f64],
        innovation: &[f64],
        prior: &[f64],
        x_prev: &[f64],
        prior_prev: &[f64],
        gain: &mut [f64],
    ) {
        for i in 0..self.arch.p {
            self.diff_z[i] = z[i] - z_prev[i];
        }
        wrap_residual(&mut self.diff_z, &self.arch.angular_latent);
        normalize_into(&self.diff_z, &mut self.f[0]);
        self.diff_z.copy_from_slice(innovation);
        wrap_residual(&mut self.diff_z, &self.arch.angular_latent);
        normalize_into(&self.diff_z, &mut self.f[1]);
        for i in 0..self.arch.m {
            self.diff_x[i] = x_prev[i] - prior_prev[i];
        }
        wrap_residual(&mut self.diff_x, &self.arch.angular_state);
        normalize_into(&self.diff_x, &mut self.f[2]);
        for i in 0..self.arch.m {
            self.diff_x[i] = prior[i] - x_prev[i];
        }
        wrap_residual(&mut self.diff_x, &self.arch.angular_state);
        normalize_into(&self.diff_x, &mut self.f[3]);

        self.gru_q.step(&[&self.f[3]], &mut self.hq);
        self.gru_sigma.step(&[&self.hq, &self.f[2]], &mut self.hsigma);
        self.expand.apply(&[&self.hsigma], &mut self.e);
        for v in &mut self.e {
            *v = v.max(0.0);
        }
        self.gru_s.step(&[&self.e, &self.f[0], &self.f[1]], &mut self.hs);
        self.head1.apply(&[&self.hsigma, &self.hs], &mut self.h1);
        for v in &mut self.h1 {
            *v = v.max(0.0);
        }
        self.head2.apply(&[&self.h1], gain);
    }
}

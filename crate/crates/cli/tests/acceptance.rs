//! Exit criteria of the toolkit. Every criterion prints exactly one
//! `PASS`/`FAIL` line; the process fails if any criterion fails.
//!
//! Arguments select criteria by number or by a substring of their name,
//! e.g. `cargo test -p latentkf-cli --test acceptance -- 1 4 latency`.
//! Training-based criteria keep checkpoints in `$LATENTKF_CACHE`, falling
//! back to a directory under the cargo target dir, so reruns only evaluate.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use latentkf::encoder::{BnMode, Encoder, EncoderArch, Normalization, PriorBranch};
use latentkf::filters::{ekf_predict, ekf_update, EkfState, JacobianMode};
use latentkf::gainnet::{GainNet, GainNetArch};
use latentkf::pipeline::{rollout_loss, LatentKalmanNet, ModelRow};
use latentkf::ssm::{
    apply_noise_in_place, lorenz_evolve, lorenz_system_matrix, lorenz_transition_matrix, render_psf, Dynamics,
    LorenzConfig, Model, ObservationNoise, Pendulum, SelectionMatrix, StateVector, PSF_PEAK,
};
use latentkf_autodiff::check::{check_inputs, check_params, GradCheckOptions};
use latentkf_autodiff::{BatchNorm, Binding, Conv2d, Dense, ExecMode, Graph, GruCell, ParamSet, Tensor, Var};
use latentkf_cli::cache::Cache;
use latentkf_cli::config::{ExperimentConfig, Mismatch, ModelKind, Variant};
use latentkf_cli::latency::{measure, EKF_NUMERICAL, LATENT_KALMANNET};
use latentkf_cli::runner::{generate_data, train_variants};
use latentkf_cli::study::Study;
use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    number: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const MIN: u64 = 60;

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion {
            number: 1,
            name: "ekf_matches_riccati_steady_state",
            budget: Duration::from_secs(1),
            run: ekf_riccati,
        },
        Criterion {
            number: 2,
            name: "gain_gradient_closed_form",
            budget: Duration::from_secs(1),
            run: gain_gradient,
        },
        Criterion {
            number: 3,
            name: "gradcheck_ops_and_unrolled_pipeline",
            budget: Duration::from_secs(MIN),
            run: gradcheck_everything,
        },
        Criterion {
            number: 4,
            name: "lorenz_discretization_vs_matrix_exponential",
            budget: Duration::from_secs(1),
            run: lorenz_discretization,
        },
        Criterion {
            number: 5,
            name: "pendulum_design_step_ordering",
            budget: Duration::from_secs(120 * MIN),
            run: pendulum_design_steps,
        },
        Criterion {
            number: 6,
            name: "lorenz_full_information_ordering",
            budget: Duration::from_secs(180 * MIN),
            run: lorenz_full_information,
        },
        Criterion {
            number: 7,
            name: "length_generalization",
            budget: Duration::from_secs(60 * MIN),
            run: length_generalization,
        },
        Criterion {
            number: 8,
            name: "taylor_mismatch_robustness",
            budget: Duration::from_secs(180 * MIN),
            run: taylor_mismatch,
        },
        Criterion {
            number: 9,
            name: "latency_ordering",
            budget: Duration::from_secs(10 * MIN),
            run: latency_ordering,
        },
        Criterion {
            number: 10,
            name: "noise_model_statistics",
            budget: Duration::from_secs(MIN),
            run: noise_statistics,
        },
    ]
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<Criterion> = criteria()
        .into_iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| *f == c.number.to_string() || c.name.contains(f.as_str())))
        .collect();
    let mut failed = Vec::new();
    for c in &selected {
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let elapsed = t0.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = out.pass && in_budget;
        println!(
            "criterion {:>2} {:<45} {}  {} [{:.2} s of {} s]",
            c.number,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
        if !pass {
            failed.push(c.number);
        }
    }
    println!("\nacceptance: {} run, {} failed {:?}", selected.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1: scalar random walk, q² = r² = 1

struct RandomWalk;

impl Dynamics for RandomWalk {
    fn dim(&self) -> usize {
        1
    }
    fn evolve(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0];
    }
    fn jacobian(&self, _: &[f64], jac: &mut [f64]) {
        jac[0] = 1.0;
    }
}

fn ekf_riccati() -> Outcome {
    // fixed point of p ← p·r²/(p + r²) + q² with q² = r² = 1 is the golden ratio
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let mut oracle = 1.0;
    for _ in 0..200 {
        oracle = oracle / (oracle + 1.0) + 1.0;
    }
    let q = DMatrix::from_element(1, 1, 1.0);
    let r = DMatrix::from_element(1, 1, 1.0);
    let h = DMatrix::from_element(1, 1, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut st = EkfState::new(&[0.0], DMatrix::from_element(1, 1, 1.0)).expect("state");
    let (mut prior_var, mut gain) = (0.0, 0.0);
    for _ in 0..200 {
        let pred = ekf_predict(&st, &RandomWalk, &q, JacobianMode::Analytic).expect("predict");
        prior_var = pred.cov[(0, 0)];
        let z = DVector::from_element(1, rng.random_range(-3.0..3.0));
        let (next, rep) = ekf_update(&pred, &z, &h, &r, &[]).expect("update");
        gain = rep.gain[(0, 0)];
        st = next;
    }
    let (dp, dk) = ((prior_var - oracle).abs(), (gain - oracle / (oracle + 1.0)).abs());
    let pass = dp < 1e-6 && dk < 1e-6 && (oracle - golden).abs() < 1e-12 && (gain - 0.6180).abs() < 1e-4;
    Outcome::new(
        pass,
        format!("prior variance {prior_var:.9} (|Δ| {dp:.1e}), gain {gain:.9} (|Δ| {dk:.1e})"),
    )
}

// ---------------------------------------------------------------------------
// 2: d/dK ‖K Δz − Δx‖² = 2 (K Δz − Δx) Δzᵀ

fn gain_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_fd: f64 = 0.0;
    let mut worst_closed: f64 = 0.0;
    for (m, p) in [(2, 1), (3, 3), (4, 2), (6, 4)] {
        for _ in 0..5 {
            let k: Vec<f64> = (0..m * p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dz: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dx: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss_value = |k: &[f64]| -> f64 {
                (0..m)
                    .map(|i| {
                        let r: f64 = (0..p).map(|j| k[i * p + j] * dz[j]).sum::<f64>() - dx[i];
                        r * r
                    })
                    .sum()
            };
            let mut g = Graph::<f64>::new();
            let kv = g.leaf(Tensor::new(&[1, m * p], k.clone()), true);
            let zv = g.constant(Tensor::new(&[1, p], dz.clone()));
            let xv = g.constant(Tensor::new(&[1, m], dx.clone()));
            let kz = g.bmv(kv, zv).expect("bmv");
            let res = g.sub(kz, xv).expect("sub");
            let sq = g.square(res);
            let l = g.sum(sq);
            g.backward(l).expect("backward");
            let grad = g.grad(kv).expect("gradient").to_vec();
            let h = 1e-6;
            for i in 0..m {
                let r: f64 = (0..p).map(|j| k[i * p + j] * dz[j]).sum::<f64>() - dx[i];
                for j in 0..p {
                    let idx = i * p + j;
                    let (mut kp, mut km) = (k.clone(), k.clone());
                    kp[idx] += h;
                    km[idx] -= h;
                    let fd = (loss_value(&kp) - loss_value(&km)) / (2.0 * h);
                    let closed = 2.0 * r * dz[j];
                    let denom = grad[idx].abs().max(fd.abs()).max(1e-8);
                    worst_fd = worst_fd.max((grad[idx] - fd).abs() / denom);
                    worst_closed = worst_closed.max((grad[idx] - closed).abs() / closed.abs().max(1e-8));
                }
            }
        }
    }
    Outcome::new(
        worst_fd < 1e-4 && worst_closed < 1e-10,
        format!("max rel err vs finite differences {worst_fd:.2e}, vs closed form {worst_closed:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 3: finite-difference checks of every op and of a 5-step unrolled pipeline

const GRAD_TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn weighted_sum(g: &mut Graph<f64>, y: Var) -> latentkf_autodiff::Result<Var> {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::new(&shape, (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect()));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> latentkf_autodiff::Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let a = rand_tensor(rng, &[3, 4]);
    let b = rand_tensor(rng, &[3, 4]);
    let away_from_kink = Tensor::new(
        a.shape(),
        a.data().iter().map(|&x| if x.abs() < 0.05 { x + 0.2 } else { x }).collect(),
    );
    let pend_states = Tensor::new(&[3, 2], vec![0.3, -0.4, 2.0, 1.5, -1.2, 0.1]);
    let lorenz_states = Tensor::new(&[2, 3], vec![1.0, -2.0, 20.0, -7.5, -8.0, 25.0]);
    vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        ("affine", vec![a.clone()], Box::new(|g, v| {
            let y = g.affine(v[0], 1.7, -0.3);
            weighted_sum(g, y)
        })),
        ("scale", vec![a.clone()], Box::new(|g, v| {
            let y = g.scale(v[0], -2.5);
            weighted_sum(g, y)
        })),
        ("relu", vec![away_from_kink], Box::new(|g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y)
        })),
        ("tanh", vec![a.clone()], Box::new(|g, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y)
        })),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y)
        })),
        ("sin", vec![a.clone()], Box::new(|g, v| {
            let y = g.sin(v[0]);
            weighted_sum(g, y)
        })),
        ("square+mean", vec![a.clone()], Box::new(|g, v| {
            let y = g.square(v[0]);
            Ok(g.mean(y))
        })),
        ("sum", vec![a.clone()], Box::new(|g, v| {
            let y = g.tanh(v[0]);
            Ok(g.sum(y))
        })),
        ("reshape+flatten", vec![rand_tensor(rng, &[2, 2, 3])], Box::new(|g, v| {
            let f = g.flatten(v[0])?;
            let r = g.reshape(f, &[3, 4])?;
            weighted_sum(g, r)
        })),
        ("wrap_angles", vec![rand_tensor(rng, &[2, 2])], Box::new(|g, v| {
            let big = g.affine(v[0], 5.0, 0.0);
            let w = g.wrap_angles(big, &[0])?;
            weighted_sum(g, w)
        })),
        ("concat+select_cols", vec![rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 2])], Box::new(|g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let s = g.select_cols(c, &[4, 0, 2, 0])?;
            weighted_sum(g, s)
        })),
        ("detach", vec![a.clone()], Box::new(move |g, v| {
            // gradient flows through the first factor only
            let c = g.constant(b.clone());
            let t = g.tanh(c);
            let d = g.detach(t);
            let y = g.mul(v[0], d)?;
            weighted_sum(g, y)
        })),
        ("bmv", vec![rand_tensor(rng, &[3, 6]), rand_tensor(rng, &[3, 2])], Box::new(|g, v| {
            let y = g.bmv(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        ("row_normalize", vec![rand_tensor(rng, &[4, 3])], Box::new(|g, v| {
            let y = g.row_normalize(v[0], 1e-6)?;
            weighted_sum(g, y)
        })),
        ("row_map pendulum", vec![pend_states], Box::new(|g, v| {
            let y = g.row_map(v[0], Arc::new(ModelRow::new(Model::Pendulum(Pendulum::default()))))?;
            weighted_sum(g, y)
        })),
        ("row_map lorenz", vec![lorenz_states], Box::new(|g, v| {
            let y = g.row_map(v[0], Arc::new(ModelRow::new(Model::Lorenz(LorenzConfig::default()))))?;
            weighted_sum(g, y)
        })),
        ("linear", vec![rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[5, 4]), rand_tensor(rng, &[5])], Box::new(|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y)
        })),
        (
            "conv2d",
            vec![rand_tensor(rng, &[2, 2, 7, 6]), rand_tensor(rng, &[3, 2, 3, 3]), rand_tensor(rng, &[3])],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "batch_norm_train",
            vec![rand_tensor(rng, &[3, 2, 2, 2]), rand_tensor(rng, &[2]), rand_tensor(rng, &[2])],
            Box::new(|g, v| {
                let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "batch_norm_infer",
            vec![rand_tensor(rng, &[3, 2, 2, 2]), rand_tensor(rng, &[2]), rand_tensor(rng, &[2])],
            Box::new(|g, v| {
                let y = g.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
                weighted_sum(g, y)
            }),
        ),
    ]
}

fn layer_check(rng: &mut ChaCha8Rng) -> f64 {
    let mut ps = ParamSet::<f64>::new("layers");
    let conv = Conv2d::new(&mut ps, "conv", 1, 3, 3, 2, 1, rng).expect("conv");
    let bn = BatchNorm::new(&mut ps, "bn", 3).expect("bn");
    let dense = Dense::new(&mut ps, "fc", 3 * 4 * 4, 4, rng).expect("dense");
    let gru = GruCell::new(&mut ps, "gru", 4, 3, rng).expect("gru");
    let x = rand_tensor(rng, &[4, 1, 8, 8]);
    let h0 = rand_tensor(rng, &[4, 3]);
    let rep = check_params(
        &mut ps,
        |g, b, ps| {
            let xv = g.constant(x.clone());
            let c = conv.forward(g, b, xv)?;
            let (n, _) = bn.forward(g, b, ps, c, true)?;
            let t = g.tanh(n);
            let f = g.flatten(t)?;
            let d = dense.forward(g, b, f)?;
            let mut h = g.constant(h0.clone());
            for _ in 0..3 {
                h = gru.forward(g, b, d, h)?;
            }
            weighted_sum(g, h)
        },
        GradCheckOptions::default(),
        rng,
    )
    .expect("layer gradcheck");
    assert!(rep.checked > 0);
    rep.max_rel_error
}

/// Full-size pipeline (28×28 frames, prior-fed encoder, gain network).
fn full_pipeline(model: Model, sel: Vec<usize>, rng: &mut ChaCha8Rng) -> LatentKalmanNet<f64> {
    let m = model.dim();
    let angular = model.angular().to_vec();
    let selection = SelectionMatrix::new(sel.clone(), m).expect("selection");
    let mut arch = EncoderArch::standard(28, 28, sel.len());
    arch.prior = Some(PriorBranch {
        m,
        width: 32,
        angular: angular.clone(),
        norm: Normalization::identity(m),
    });
    arch.angular_out = selection.angular_rows(&angular);
    let enc = Encoder::new(arch, rng).expect("encoder");
    let garch = GainNetArch::for_dims(m, &sel, &angular, &selection.angular_rows(&angular));
    let gain = GainNet::new(garch, rng).expect("gain network");
    LatentKalmanNet::new(model, selection, enc, gain).expect("pipeline")
}

fn unrolled_check(model: Model, sel: Vec<usize>, x0: Vec<f64>, bn: BnMode, rng: &mut ChaCha8Rng) -> (f64, String) {
    let mut net = full_pipeline(model, sel, rng);
    let m = model.dim();
    let b = x0.len() / m;
    let frames: Vec<Tensor<f64>> = (0..5)
        .map(|_| Tensor::new(&[b, 1, 28, 28], (0..b * 784).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let targets: Vec<Tensor<f64>> = (0..5)
        .map(|_| Tensor::new(&[b, m], x0.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect()))
        .collect();
    let x0t = Tensor::new(&[b, m], x0);
    let angular = model.angular().to_vec();
    let opts = GradCheckOptions {
        max_per_tensor: Some(6),
        floor: 1e-5,
        step: 1e-6,
        ..Default::default()
    };
    let view = net.clone();
    let raw = |g: &mut Graph<f64>, be: &Binding, bg: &Binding| {
        let x0v = g.constant(x0t.clone());
        let ro = view.rollout(g, be, bg, &frames, x0v, bn, None).expect("rollout");
        rollout_loss(g, &ro.estimates, &targets, &angular).expect("loss")
    };
    // compare on an O(1) loss so the floor means the same thing for both models
    let scale = {
        let mut g = Graph::new();
        let (be, bg) = (view.encoder.params.bind(&mut g), view.gain.params.bind(&mut g));
        let l = raw(&mut g, &be, &bg);
        1.0 / g.scalar(l)
    };
    let loss = |g: &mut Graph<f64>, be: &Binding, bg: &Binding| {
        let l = raw(g, be, bg);
        Ok(g.scale(l, scale))
    };
    let gain_rep = check_params(
        &mut net.gain.params,
        |g, bg, _| {
            let mut enc = view.encoder.params.clone();
            enc.set_frozen(true);
            let be = enc.bind(g);
            loss(g, &be, bg)
        },
        opts,
        rng,
    )
    .expect("gain gradcheck");
    let enc_rep = check_params(
        &mut net.encoder.params,
        |g, be, _| {
            let mut gain = view.gain.params.clone();
            gain.set_frozen(true);
            let bg = gain.bind(g);
            loss(g, be, &bg)
        },
        opts,
        rng,
    )
    .expect("encoder gradcheck");
    assert!(gain_rep.checked > 0 && enc_rep.checked > 0);
    let worst = if gain_rep.max_rel_error > enc_rep.max_rel_error { gain_rep } else { enc_rep };
    (worst.max_rel_error, format!("{:?}", worst.worst))
}

fn gradcheck_everything() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let cases = op_cases(&mut rng);
    let n_ops = cases.len();
    for (name, inputs, f) in cases {
        let rep = check_inputs(&inputs, |g, v| f(g, v), GradCheckOptions::default(), &mut rng).expect("gradcheck");
        worst = worst.max(rep.max_rel_error);
        if !rep.passes(GRAD_TOL) {
            failures.push(format!("{name} ({:.1e})", rep.max_rel_error));
        }
    }
    let layers = layer_check(&mut rng);
    worst = worst.max(layers);
    if layers >= GRAD_TOL {
        failures.push(format!("layers ({layers:.1e})"));
    }
    let pend = Model::Pendulum(Pendulum::default());
    let lorenz = Model::Lorenz(LorenzConfig::default());
    let unrolled = [
        ("pendulum/running", unrolled_check(pend, vec![0], vec![0.4, 0.1, -0.6, 0.5], BnMode::Running, &mut rng)),
        ("pendulum/batch", unrolled_check(pend, vec![0], vec![0.4, 0.1, -0.6, 0.5], BnMode::Batch, &mut rng)),
        (
            "lorenz/batch",
            unrolled_check(lorenz, vec![0, 1, 2], vec![1.0, -2.0, 20.0, -3.0, 1.5, 15.0], BnMode::Batch, &mut rng),
        ),
    ];
    for (name, (err, at)) in unrolled {
        worst = worst.max(err);
        if err >= GRAD_TOL {
            failures.push(format!("unrolled {name} ({err:.1e} at {at})"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!("{n_ops} ops, layer stack, 3 unrolled pipelines; worst rel err {worst:.2e} {failures:?}"),
    )
}

// ---------------------------------------------------------------------------
// 4: truncated Taylor transition vs exp(A·dt)

/// Scaling and squaring around a 30-term Taylor core.
fn expm(a: Matrix3<f64>) -> Matrix3<f64> {
    let norm = a.abs().row_sum().max();
    let s = (norm / 0.25).log2().ceil().max(0.0) as i32;
    let b = a / 2f64.powi(s);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..30 {
        term = term * b / k as f64;
        sum += term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

fn lorenz_discretization() -> Outcome {
    let cfg = LorenzConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // walk onto the attractor, then sample states at random spacings
    let mut x = StateVector::new(vec![1.0, 1.0, 1.0]).expect("state");
    for _ in 0..500 {
        x = lorenz_evolve(&x, cfg).expect("evolve");
    }
    let mut worst: f64 = 0.0;
    let mut worst_at = [0.0; 3];
    for _ in 0..100 {
        for _ in 0..rng.random_range(1..20) {
            x = lorenz_evolve(&x, cfg).expect("evolve");
        }
        let f = lorenz_transition_matrix(&x, cfg).expect("transition");
        let exact = expm(lorenz_system_matrix(x.as_slice()[0]) * cfg.dt);
        let err = (exact - f).norm();
        if err > worst {
            worst = err;
            worst_at.copy_from_slice(x.as_slice());
        }
    }
    Outcome::new(
        worst < 1e-4,
        format!("max Frobenius error over 100 attractor states {worst:.3e} (at x = {worst_at:.2?})"),
    )
}

// ---------------------------------------------------------------------------
// 10: noise and rendering statistics

fn noise_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 1_000_000usize;
    // salt and pepper at p_r = 0.01: corrupted pixels leave the mid-gray value
    let noise = ObservationNoise::salt_and_pepper_from_level(2.0);
    let ObservationNoise::SaltAndPepper { p_r, amplitude } = noise else {
        unreachable!()
    };
    let mut px = vec![0.5f32; n];
    apply_noise_in_place(&mut px, noise, &mut rng);
    let corrupted = px.iter().filter(|&&v| v != 0.5).count() as f64;
    let extremes = px.iter().all(|&v| v == 0.5 || v == 0.0 || v == amplitude as f32);
    let mean = n as f64 * p_r;
    let sd = (n as f64 * p_r * (1.0 - p_r)).sqrt();
    let sp_ok = (corrupted - mean).abs() <= 3.0 * sd && extremes;

    // PSF at an integer grid location peaks there with the stated height
    let x = StateVector::new(vec![11.0, 17.0, 2.5]).expect("state");
    let frame = render_psf(&x, 28, 28).expect("render");
    let at = frame.at(17, 11);
    let max = frame.pixels.iter().cloned().fold(f32::MIN, f32::max);
    let psf_ok = at == PSF_PEAK && max == at;

    let noise = ObservationNoise::gaussian_from_level(23.0);
    let ObservationNoise::Gaussian { r2 } = noise else { unreachable!() };
    let mut px = vec![0.0f32; n];
    apply_noise_in_place(&mut px, noise, &mut rng);
    let m = px.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = px.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let gauss_ok = ((var - r2) / r2).abs() < 0.02;

    Outcome::new(
        sp_ok && psf_ok && gauss_ok,
        format!(
            "S&P {corrupted} corrupted (expected {mean:.0} ± {:.0}); PSF peak {at} at the state; Gaussian variance {var:.6} vs {r2:.6}",
            3.0 * sd
        ),
    )
}

// ---------------------------------------------------------------------------
// 5–9: trained pipelines at desk scale

fn cache() -> Cache {
    Cache::from_env(&PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache"))
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn fmt_db(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.2}"))
}

fn pendulum_design_steps() -> Outcome {
    let study = Study::new(ModelKind::Pendulum, vec![23.0], SEEDS.to_vec());
    let res = study.run(&cache(), ExecMode::default()).expect("pendulum study");
    let med = |v| res.median(v, 23.0);
    let (enc, prior, ekf, lkn) = (
        med(Variant::Encoder),
        med(Variant::EncoderPrior),
        med(Variant::EncoderPriorEkf),
        med(Variant::LatentKalmanNet),
    );
    let pass = match (enc, prior, ekf, lkn) {
        (Some(e), Some(p), Some(k), Some(l)) => l < k && k < p && p < e && k - l >= 1.5,
        _ => false,
    };
    Outcome::new(
        pass,
        format!(
            "median dB: encoder {}, +prior {}, +EKF {}, latent-kalmannet {}",
            fmt_db(enc),
            fmt_db(prior),
            fmt_db(ekf),
            fmt_db(lkn)
        ),
    )
}

fn lorenz_study(mismatch: Mismatch, t_test: Option<usize>, variants: &[Variant]) -> latentkf_cli::study::StudyResult {
    let mut study = Study::new(ModelKind::Lorenz, vec![2.0], SEEDS.to_vec());
    study.variants = variants.to_vec();
    study.mismatch = mismatch;
    study.t_test = t_test;
    study.run(&cache(), ExecMode::default()).expect("lorenz study")
}

const LORENZ_VARIANTS: [Variant; 3] = [Variant::EncoderPrior, Variant::EncoderPriorEkf, Variant::LatentKalmanNet];

fn lorenz_full_information() -> Outcome {
    let res = lorenz_study(Mismatch::None, None, &LORENZ_VARIANTS);
    let ekf = res.median(Variant::EncoderPriorEkf, 2.0);
    let lkn = res.median(Variant::LatentKalmanNet, 2.0);
    let pass = matches!((ekf, lkn), (Some(k), Some(l)) if k - l >= 0.3);
    Outcome::new(
        pass,
        format!(
            "median dB: +prior {}, +EKF {}, latent-kalmannet {}",
            fmt_db(res.median(Variant::EncoderPrior, 2.0)),
            fmt_db(ekf),
            fmt_db(lkn)
        ),
    )
}

fn max_hidden(res: &latentkf_cli::study::StudyResult) -> f64 {
    res.cells
        .iter()
        .flat_map(|(_, evals)| evals.iter().flatten())
        .filter_map(|e| e.max_hidden_norm)
        .fold(0.0, f64::max)
}

fn length_generalization() -> Outcome {
    let short = lorenz_study(Mismatch::None, None, &[Variant::LatentKalmanNet]);
    let long = lorenz_study(Mismatch::None, Some(1000), &[Variant::LatentKalmanNet]);
    let (a, b) = (
        short.median(Variant::LatentKalmanNet, 2.0),
        long.median(Variant::LatentKalmanNet, 2.0),
    );
    let (ha, hb) = (max_hidden(&short), max_hidden(&long));
    let bounded = hb.is_finite() && hb <= 1.25 * ha;
    let pass = matches!((a, b), (Some(a), Some(b)) if b - a < 1.0) && bounded;
    Outcome::new(
        pass,
        format!(
            "latent-kalmannet median dB: T=100 {}, T=1000 {}; max hidden norm {ha:.3} -> {hb:.3}",
            fmt_db(a),
            fmt_db(b)
        ),
    )
}

fn taylor_mismatch() -> Outcome {
    let matched = lorenz_study(Mismatch::None, None, &[Variant::LatentKalmanNet]);
    let crude = lorenz_study(Mismatch::Taylor { train_j: 2, true_j: 5 }, None, &LORENZ_VARIANTS);
    let l5 = matched.median(Variant::LatentKalmanNet, 2.0);
    let l2 = crude.median(Variant::LatentKalmanNet, 2.0);
    let ekf2 = crude.median(Variant::EncoderPriorEkf, 2.0);
    let prior2 = crude.median(Variant::EncoderPrior, 2.0);
    let lkn_ok = matches!((l5, l2), (Some(a), Some(b)) if (a - b).abs() <= 1.0);
    let ekf_ok = matches!((ekf2, prior2), (Some(a), Some(b)) if (a - b).abs() < 0.5);
    Outcome::new(
        lkn_ok && ekf_ok,
        format!(
            "latent-kalmannet J=5 {} vs J=2 {}; J=2 +EKF {} vs +prior {}",
            fmt_db(l5),
            fmt_db(l2),
            fmt_db(ekf2),
            fmt_db(prior2)
        ),
    )
}

fn latency_ordering() -> Outcome {
    let mut cfg = ExperimentConfig::new(ModelKind::Lorenz, 2.0, 0, false);
    cfg.t_test = 200;
    let cache = cache();
    let ds = generate_data(&cfg, false, ExecMode::default()).expect("data");
    let trained = train_variants(
        &cfg,
        &ds,
        &[Variant::EncoderPriorEkf, Variant::LatentKalmanNet],
        &cache,
        ExecMode::default(),
    );
    drop(ds);
    assert!(trained.failures.is_empty(), "training failed: {:?}", trained.failures);
    let test = generate_data(&cfg, true, ExecMode::default()).expect("test data");
    let rep = measure(
        trained.pipeline.as_ref().expect("pipeline"),
        trained.prior_encoder.as_ref().expect("encoder"),
        trained.ekf.as_ref().expect("ekf"),
        &cfg.filter_model(),
        &cfg.data_spec().selection,
        &test,
    )
    .expect("latency");
    let lkn = rep.row(LATENT_KALMANNET).expect("row").us_per_step;
    let ekf = rep.row(EKF_NUMERICAL).expect("row").us_per_step;
    Outcome::new(
        lkn < ekf,
        format!(
            "{} trajectories x {} steps{}: latent-kalmannet {lkn:.2} us/step, numerical-Jacobian EKF {ekf:.2} us/step",
            rep.trajectories,
            rep.steps_per_trajectory,
            if rep.pinned { ", pinned" } else { "" }
        ),
    )
}

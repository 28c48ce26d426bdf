use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use latentkf_autodiff::ExecMode;
use latentkf_cli::cache::{Cache, CACHE_ENV};
use latentkf_cli::config::{ExperimentConfig, Mismatch, ModelKind, OptimizerChoice, Variant};
use latentkf_cli::latency::{format_report, measure};
use latentkf_cli::plot::plot_metrics_file;
use latentkf_cli::report::format_table;
use latentkf_cli::runner::{generate_data, train_variants};
use latentkf_cli::study::{write_outputs, Study};

#[derive(Parser)]
#[command(name = "latentkf", version, about = "Learned-gain filtering from images: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write training and test datasets under `--out/data`.
    Generate(Common),
    /// Train the selected variants into the checkpoint cache.
    Train(Common),
    /// Train (or load) and evaluate; writes metrics.csv and a plot.
    Evaluate(Common),
    /// Evaluate under a model mismatch (`--taylor-j` or `--decimate`).
    Mismatch(Common),
    /// Per-step inference time: learned gain vs latent EKF.
    Latency(Common),
    /// Render metrics files as MSE-vs-noise plots.
    Plot(PlotArgs),
}

#[derive(Args, Clone, Debug)]
struct Common {
    #[arg(long, value_enum, default_value = "pendulum")]
    model: ModelKind,
    /// One or more noise levels (pendulum: −10·log10 r², Lorenz: −log10 p).
    #[arg(long = "noise-level", num_args = 1..)]
    noise_level: Vec<f64>,
    /// Variants to run; all four when omitted.
    #[arg(long, value_enum, num_args = 1..)]
    variant: Vec<Variant>,
    #[arg(long = "t-train")]
    t_train: Option<usize>,
    #[arg(long = "t-test")]
    t_test: Option<usize>,
    /// Taylor order assumed by the filters (data keeps order 5).
    #[arg(long = "taylor-j")]
    taylor_j: Option<usize>,
    /// Simulate at dt/ratio and keep every ratio-th step.
    #[arg(long)]
    decimate: Option<usize>,
    #[arg(long, num_args = 1.., default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// D=1000, T=200 and the longer optimization budget.
    #[arg(long = "full-scale")]
    full_scale: bool,
    /// Override the number of alternating epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the number of encoder warm-start epochs.
    #[arg(long = "encoder-epochs")]
    encoder_epochs: Option<usize>,
    /// Update rule; `adam` switches to its own learning rates.
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: OptimizerChoice,
}

#[derive(Args, Clone, Debug)]
struct PlotArgs {
    /// Metrics files; defaults to `<out>/metrics.csv`.
    metrics: Vec<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

impl Common {
    fn levels(&self) -> Vec<f64> {
        if !self.noise_level.is_empty() {
            return self.noise_level.clone();
        }
        match (self.model, self.full_scale) {
            (ModelKind::Pendulum, false) => vec![15.2, 23.0],
            (ModelKind::Pendulum, true) => vec![6.0, 15.2, 23.0, 30.0],
            (ModelKind::Lorenz, false) => vec![2.0, 3.0],
            (ModelKind::Lorenz, true) => vec![0.3, 1.0, 2.0, 3.0],
        }
    }

    fn mismatch(&self) -> anyhow::Result<Mismatch> {
        match (self.taylor_j, self.decimate) {
            (Some(_), Some(_)) => anyhow::bail!("--taylor-j and --decimate are mutually exclusive"),
            (Some(j), None) => Ok(Mismatch::Taylor { train_j: j, true_j: 5 }),
            (None, Some(r)) => Ok(Mismatch::Decimation { ratio: r }),
            (None, None) => Ok(Mismatch::None),
        }
    }

    fn study(&self) -> anyhow::Result<Study> {
        let mut s = Study::new(self.model, self.levels(), self.seed.clone());
        if !self.variant.is_empty() {
            s.variants = self.variant.clone();
        }
        s.t_train = self.t_train;
        s.t_test = self.t_test;
        s.mismatch = self.mismatch()?;
        s.full_scale = self.full_scale;
        Ok(s)
    }

    fn configs(&self) -> anyhow::Result<Vec<ExperimentConfig>> {
        let mut cfgs = self.study()?.configs();
        for c in &mut cfgs {
            if self.optimizer == OptimizerChoice::Adam {
                c.scale = c.scale.clone().with_adam();
            }
            if let Some(e) = self.epochs {
                c.scale.epochs = e;
            }
            if let Some(e) = self.encoder_epochs {
                c.scale.encoder_epochs = e;
            }
            c.validate()?;
        }
        Ok(cfgs)
    }

    fn cache(&self) -> Cache {
        Cache::from_env(&self.out.join("cache"))
    }
}

fn evaluate(c: &Common) -> anyhow::Result<()> {
    let study = c.study()?;
    let cache = c.cache();
    let mut rows = Vec::new();
    for cfg in c.configs()? {
        let (r, _, _) = latentkf_cli::runner::run_cell(&cfg, &study.variants, &cache, ExecMode::default())?;
        rows.extend(r);
    }
    print!("{}", format_table(&rows));
    let (csv, svg) = write_outputs(&rows, &c.out)?;
    println!("wrote {}", csv.display());
    if let Some(svg) = svg {
        println!("wrote {}", svg.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(c) => {
            for cfg in c.configs()? {
                for test in [false, true] {
                    let ds = generate_data(&cfg, test, ExecMode::default())?;
                    let name = if test { "test" } else { "train" };
                    let dir = c.out.join("data").join(format!("{}-{}-{}-{name}", cfg.model_name(), cfg.noise_level, cfg.seed));
                    ds.save(&dir).with_context(|| format!("writing {}", dir.display()))?;
                    println!("wrote {} ({} trajectories x {} steps)", dir.display(), ds.count(), ds.len_t());
                }
            }
        }
        Command::Train(c) => {
            let study = c.study()?;
            let cache = c.cache();
            anyhow::ensure!(cache.root().is_some(), "training needs a cache directory (set {CACHE_ENV} or --out)");
            for cfg in c.configs()? {
                let ds = generate_data(&cfg, false, ExecMode::default())?;
                let trained = train_variants(&cfg, &ds, &study.variants, &cache, ExecMode::default());
                for (v, msg) in &trained.failures {
                    eprintln!("{v} (level {}, seed {}): {msg}", cfg.noise_level, cfg.seed);
                }
                if let Some(log) = &trained.train_log {
                    if let (Some(b), Some(last)) = (log.best_epoch, log.epochs.last()) {
                        println!(
                            "level {} seed {}: best epoch {b}, final validation MSE {:.4e}",
                            cfg.noise_level, cfg.seed, last.val_mse
                        );
                    }
                }
            }
        }
        Command::Evaluate(c) => evaluate(&c)?,
        Command::Mismatch(c) => {
            anyhow::ensure!(c.mismatch()? != Mismatch::None, "mismatch needs --taylor-j or --decimate");
            evaluate(&c)?;
        }
        Command::Latency(c) => {
            let cache = c.cache();
            let variants = [Variant::EncoderPriorEkf, Variant::LatentKalmanNet];
            for mut cfg in c.configs()? {
                cfg.t_test = c.t_test.unwrap_or(200);
                let ds = generate_data(&cfg, false, ExecMode::default())?;
                let trained = train_variants(&cfg, &ds, &variants, &cache, ExecMode::default());
                drop(ds);
                if let Some((v, msg)) = trained.failures.first() {
                    anyhow::bail!("{v} could not be trained: {msg}");
                }
                let test = generate_data(&cfg, true, ExecMode::default())?;
                let report = measure(
                    trained.pipeline.as_ref().expect("trained"),
                    trained.prior_encoder.as_ref().expect("trained"),
                    trained.ekf.as_ref().expect("fitted"),
                    &cfg.filter_model(),
                    &cfg.data_spec().selection,
                    &test,
                )?;
                print!("{}", format_report(&report));
                let path = c.out.join(format!("latency-{}-{}-{}.csv", cfg.model_name(), cfg.noise_level, cfg.seed));
                report.write_csv(&path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Plot(p) => {
            let files = if p.metrics.is_empty() {
                vec![p.out.join("metrics.csv")]
            } else {
                p.metrics.clone()
            };
            for f in files {
                match plot_metrics_file(&f, &p.out)? {
                    Some(svg) => println!("wrote {}", svg.display()),
                    None => eprintln!("{}: nothing to plot", f.display()),
                }
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

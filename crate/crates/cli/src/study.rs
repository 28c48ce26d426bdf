//! Grids of experiment cells (levels × seeds) and their output files.

use std::path::{Path, PathBuf};

use latentkf_autodiff::ExecMode;

use crate::cache::Cache;
use crate::config::{ExperimentConfig, Mismatch, ModelKind, Variant};
use crate::plot::plot_metrics_file;
use crate::report::{save_metrics, MetricRecord};
use crate::runner::{run_cell, VariantEval};

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub model: ModelKind,
    pub noise_levels: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub t_train: Option<usize>,
    pub t_test: Option<usize>,
    pub mismatch: Mismatch,
    pub full_scale: bool,
}

impl Study {
    pub fn new(model: ModelKind, noise_levels: Vec<f64>, seeds: Vec<u64>) -> Self {
        Self {
            model,
            noise_levels,
            variants: Variant::ALL.to_vec(),
            seeds,
            t_train: None,
            t_test: None,
            mismatch: Mismatch::None,
            full_scale: false,
        }
    }

    /// One configuration per (level, seed), levels outermost.
    pub fn configs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &level in &self.noise_levels {
            for &seed in &self.seeds {
                let mut cfg = ExperimentConfig::new(self.model, level, seed, self.full_scale);
                if let Some(t) = self.t_train {
                    cfg.t_train = t;
                }
                cfg.t_test = self.t_test.unwrap_or(cfg.t_train);
                cfg.mismatch = self.mismatch;
                out.push(cfg);
            }
        }
        out
    }

    pub fn run(&self, cache: &Cache, exec: ExecMode) -> anyhow::Result<StudyResult> {
        anyhow::ensure!(!self.variants.is_empty(), "no variants selected");
        anyhow::ensure!(!self.noise_levels.is_empty() && !self.seeds.is_empty(), "empty level or seed grid");
        let mut res = StudyResult::default();
        for cfg in self.configs() {
            let (rows, evals, _) = run_cell(&cfg, &self.variants, cache, exec)?;
            res.rows.extend(rows);
            res.cells.push((cfg, evals));
        }
        Ok(res)
    }
}

#[derive(Default)]
pub struct StudyResult {
    pub rows: Vec<MetricRecord>,
    pub cells: Vec<(ExperimentConfig, Vec<Option<VariantEval>>)>,
}

impl StudyResult {
    /// Per-seed dB values of `variant` at `level`, failed runs excluded.
    pub fn values(&self, variant: Variant, level: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.noise_level == level && r.mse_db.is_finite())
            .map(|r| r.mse_db)
            .collect()
    }

    pub fn median(&self, variant: Variant, level: f64) -> Option<f64> {
        median(&self.values(variant, level))
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `metrics.csv` and its plot under `out`.
pub fn write_outputs(rows: &[MetricRecord], out: &Path) -> anyhow::Result<(PathBuf, Option<PathBuf>)> {
    let csv = out.join("metrics.csv");
    save_metrics(&csv, rows)?;
    let svg = plot_metrics_file(&csv, out)?;
    Ok((csv, svg))
}

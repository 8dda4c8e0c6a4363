use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_model, train, TrainConfig};
use crate::blocks::{UnitKind, UpsamplerKind};
use crate::data::{split_folds, SegmentationSample};
use crate::metrics::{mean_sd, Axis, MetricRecord, MetricReport, DEFAULT_THRESHOLD};
use crate::network::{Model, ModelConfig};
use crate::{csv_footer, Error, Result, VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub folds: usize,
    /// Independent repetitions with seeds offset by the run index.
    pub runs: usize,
    /// Fixes the fold assignment; shared by all runs.
    pub fold_seed: u64,
    pub threshold: f64,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig {
            folds: 5,
            runs: 3,
            fold_seed: 0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossvalResult {
    /// Every run's held-out predictions pooled over folds.
    pub pooled: MetricReport,
    /// One report per fold, holding that fold's images for every run.
    pub folds: Vec<MetricReport>,
}

/// Trains `folds × runs` models, each evaluated on its held-out fold.
/// Cells run in parallel on the current rayon pool.
pub fn run_crossval(
    samples: &[SegmentationSample],
    cv: &CrossvalConfig,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    axes: &[Axis],
) -> Result<CrossvalResult> {
    if cv.runs == 0 {
        return Err(Error::Config("cross-validation needs at least one run".into()));
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let folds = split_folds(&ids, cv.folds, cv.fold_seed)?;
    let cells: Vec<(usize, usize)> = (0..cv.runs).flat_map(|r| (0..cv.folds).map(move |f| (r, f))).collect();
    let results: Vec<Result<Vec<MetricRecord>>> = cells
        .par_iter()
        .map(|&(run, fold)| {
            let held: Vec<SegmentationSample> = samples
                .iter()
                .filter(|s| folds[fold].contains(&s.id))
                .cloned()
                .collect();
            let rest: Vec<SegmentationSample> = samples
                .iter()
                .filter(|s| !folds[fold].contains(&s.id))
                .cloned()
                .collect();
            let mut cfg = train_cfg.clone();
            cfg.seed = cfg.seed.wrapping_add(run as u64);
            cfg.checkpoint_every = None;
            if cfg.batch_size > rest.len() {
                warn!("fold {fold}: batch {} shrinks to {}", cfg.batch_size, rest.len());
                cfg.batch_size = rest.len();
            }
            let mut model = Model::build(model_cfg.clone().with_seed(model_cfg.seed.wrapping_add(run as u64)))?;
            train(&mut model, &rest, None, &cfg, |_| {})?;
            evaluate_model(&model, &held, cv.threshold, cfg.batch_size)
        })
        .collect();
    let mut per_cell = Vec::with_capacity(results.len());
    for r in results {
        per_cell.push(r?);
    }
    let echo = serde_json::json!({ "crossval": cv, "train": train_cfg, "model": model_cfg });
    let cell = |run: usize, fold: usize| &per_cell[run * cv.folds + fold];
    let pooled_runs: Vec<Vec<MetricRecord>> = (0..cv.runs)
        .map(|r| (0..cv.folds).flat_map(|f| cell(r, f).clone()).collect())
        .collect();
    let pooled = MetricReport::build(model_cfg.name(), pooled_runs, axes, echo.clone())?;
    let folds = (0..cv.folds)
        .map(|f| {
            let runs = (0..cv.runs).map(|r| cell(r, f).clone()).collect();
            MetricReport::build(format!("{} fold {f}", model_cfg.name()), runs, axes, echo.clone())
        })
        .collect::<Result<_>>()?;
    Ok(CrossvalResult { pooled, folds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    /// Every encoder × decoder unit pairing with BU blocks.
    Backbone,
    /// The AU network over reduction ratios.
    ReductionRatio,
}

pub const REDUCTION_RATIOS: [usize; 5] = [2, 4, 8, 16, 32];

pub const ABLATION_HEADER: &str = "model,dsc_mean,dsc_sd,sen_mean,sen_sd,da_mean,da_sd,hau_mean,hau_sd";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub reduction_ratio: Option<usize>,
    /// `None` when the cell failed.
    pub metrics: Option<[f64; 8]>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub toolkit: String,
    pub grid: AblationGrid,
    pub config: serde_json::Value,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Failed rows keep their name with empty cells and are listed again
    /// in the trailing comments.
    pub fn to_csv(&self) -> String {
        let mut text = format!("{ABLATION_HEADER}\n");
        for row in &self.rows {
            let cells: Vec<String> = match &row.metrics {
                Some(m) => m.iter().map(|v| v.to_string()).collect(),
                None => vec![String::new(); 8],
            };
            text.push_str(&format!("{},{}\n", row.model, cells.join(",")));
        }
        for row in self.rows.iter().filter(|r| r.metrics.is_none()) {
            text.push_str(&format!(
                "# failed: {}: {}\n",
                row.model,
                row.error.as_deref().unwrap_or("unknown").replace('\n', " ")
            ));
        }
        text.push_str(&csv_footer(&self.config));
        text
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }
}

/// The models of one ablation grid, in table order.
pub fn grid_configs(grid: AblationGrid, base: &ModelConfig) -> Vec<ModelConfig> {
    match grid {
        AblationGrid::Backbone => UnitKind::ALL
            .into_iter()
            .flat_map(|e| UnitKind::ALL.into_iter().map(move |d| (e, d)))
            .map(|(e, d)| ModelConfig {
                encoder_unit: e,
                decoder_unit: d,
                upsampler: UpsamplerKind::Bu,
                ..base.clone()
            })
            .collect(),
        AblationGrid::ReductionRatio => REDUCTION_RATIOS
            .into_iter()
            .map(|r| ModelConfig {
                upsampler: UpsamplerKind::Au,
                reduction_ratio: r,
                ..base.clone()
            })
            .collect(),
    }
}

/// Cross-validates every cell of `grid` and tabulates the overall mean ±
/// s.d. across runs. A failing cell is reported, not fatal.
pub fn run_ablation(
    grid: AblationGrid,
    samples: &[SegmentationSample],
    cv: &CrossvalConfig,
    train_cfg: &TrainConfig,
    base: &ModelConfig,
) -> AblationTable {
    let configs = grid_configs(grid, base);
    let rows = configs
        .par_iter()
        .map(|cfg| {
            let model = match grid {
                AblationGrid::Backbone => cfg.name(),
                AblationGrid::ReductionRatio => format!("{} (r={})", cfg.name(), cfg.reduction_ratio),
            };
            let reduction_ratio = (grid == AblationGrid::ReductionRatio).then_some(cfg.reduction_ratio);
            let outcome = cfg
                .validate()
                .and_then(|_| run_crossval(samples, cv, train_cfg, cfg, &[Axis::Overall]));
            match outcome {
                Ok(res) => {
                    let runs = &res.pooled.runs;
                    let per_run = |f: fn(&MetricRecord) -> f64| -> (f64, f64) {
                        let means: Vec<f64> = runs
                            .iter()
                            .map(|r| r.iter().map(f).sum::<f64>() / r.len() as f64)
                            .collect();
                        mean_sd(&means)
                    };
                    let (d, s, a, h) = (
                        per_run(|r| r.dsc),
                        per_run(|r| r.sen),
                        per_run(|r| r.delta_a),
                        per_run(|r| r.hau),
                    );
                    AblationRow {
                        model,
                        reduction_ratio,
                        metrics: Some([d.0, d.1, s.0, s.1, a.0, a.1, h.0, h.1]),
                        error: None,
                    }
                }
                Err(e) => {
                    warn!("ablation cell {model} failed: {e}");
                    AblationRow {
                        model,
                        reduction_ratio,
                        metrics: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    AblationTable {
        toolkit: format!("aunet {VERSION}"),
        grid,
        config: serde_json::json!({ "grid": grid, "crossval": cv, "train": train_cfg, "model": base }),
        rows,
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use aunet::data::{
    extract_mass_patch, generate_synthetic, load_directory, preprocess, read_png, standardize, write_directory,
    RawCase, SegmentationSample,
};
use aunet::metrics::{
    binarize, confusion, dsc, ecdf, evaluate, wilcoxon_signed_rank, write_ecdf_csv, Mask, MetricRecord, MetricReport,
    Tags,
};
use aunet::network::{Model, ModelConfig};
use aunet::training::{evaluate_model, run_ablation, train, AblationGrid};
use aunet::Error;
use log::info;

use crate::config::RunConfig;
use crate::render::{overlay, write_png, Pixels, Rgb};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn ensure_dir(dir: &Path) -> aunet::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Like `create_dir_all`, but the parent must already exist.
fn output_dir(dir: &Path) -> aunet::Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(io_err(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output parent directory does not exist"),
            ));
        }
    }
    ensure_dir(dir)
}

fn write_text(path: &Path, text: &str) -> aunet::Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn raw_cases(cfg: &RunConfig) -> anyhow::Result<Vec<RawCase>> {
    let cases = match &cfg.data.root {
        Some(root) => load_directory(root).with_context(|| format!("loading dataset {}", root.display()))?,
        None => generate_synthetic(&cfg.synth_params(), cfg.data.count)?,
    };
    if !cfg.data.mass_patch {
        return Ok(cases);
    }
    Ok(cases
        .iter()
        .map(|c| extract_mass_patch(c).map(|(p, _)| p))
        .collect::<aunet::Result<_>>()?)
}

fn to_sample(cfg: &RunConfig, case: &RawCase) -> aunet::Result<SegmentationSample> {
    match cfg.data.crop_tau {
        Some(tau) => preprocess(case, tau, cfg.data.size),
        None => standardize(case, cfg.data.size),
    }
}

pub fn load_samples(cfg: &RunConfig) -> anyhow::Result<Vec<SegmentationSample>> {
    let cases = raw_cases(cfg)?;
    Ok(cases.iter().map(|c| to_sample(cfg, c)).collect::<aunet::Result<_>>()?)
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..a.clone() } == ModelConfig { seed: 0, ..b.clone() }
}

/// Loads a model checkpoint and checks it against the model section.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> anyhow::Result<Model> {
    let model = Model::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if !same_architecture(model.config(), &cfg.model) {
        return Err(Error::Checkpoint(format!(
            "{} holds {} but the config describes {}",
            path.display(),
            model.name(),
            cfg.model.name()
        ))
        .into());
    }
    Ok(model)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let params = cfg.synth_params();
    let cases = generate_synthetic(&params, cfg.data.count)?;
    output_dir(out)?;
    write_directory(out, &cases)?;
    write_text(&out.join("config.json"), &serde_json::to_string_pretty(&cfg.echo())?)?;
    let ratios: Vec<f64> = cases
        .iter()
        .map(|c| c.mask.area() as f64 / (c.image.h * c.image.w) as f64)
        .collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(format!(
        "wrote {} cases to {}\narea ratio: min {lo:.5} mean {mean:.5} max {hi:.5} (requested {:.5}..{:.5})",
        cases.len(),
        out.display(),
        params.area_ratio.0,
        params.area_ratio.1
    ))
}

/// Files written by [`cmd_train`].
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const TRAIN_METRICS_FILE: &str = "train_metrics.csv";

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let samples = load_samples(cfg)?;
    output_dir(out)?;
    let mut model = Model::build(cfg.model.clone())?;
    info!(
        "training {} ({} parameters) on {} samples",
        model.name(),
        model.count_params(),
        samples.len()
    );
    let val = cfg.train.validate_every.map(|_| samples.as_slice());
    let state = train(&mut model, &samples, val, &cfg.train, |r| {
        info!("epoch {} lr {:e} loss {:.6}", r.epoch, r.lr, r.train_loss)
    })
    .context("training")?;
    let echo = cfg.echo();
    model.save(out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(HISTORY_FILE), &state.history.to_csv(&echo))?;
    let records = evaluate_model(&model, &samples, cfg.eval.threshold, cfg.eval.batch_size)?;
    let report = MetricReport::build(model.name(), vec![records], &cfg.eval.axes, echo)?;
    report.write_csv(out.join(TRAIN_METRICS_FILE))?;
    let last = state.history.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
    let train_dsc = report.overall().map(|r| r.dsc_mean).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} for {} epochs: final loss {last:.6}, train DSC {train_dsc:.4}\ncheckpoint {}",
        model.name(),
        state.epoch,
        out.join(CHECKPOINT_FILE).display()
    ))
}

fn mask_from_png(path: &Path) -> aunet::Result<Mask> {
    let img = read_png(path)?;
    Mask::new(img.h, img.w, img.data.iter().map(|&v| v >= 0.5).collect())
}

/// Per-image CSV, JSON report and ECDF CSVs for DSC and Hausdorff.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
) -> anyhow::Result<MetricReport> {
    let records: Vec<MetricRecord> = match (checkpoint, predictions) {
        (_, Some(dir)) => {
            // predictions are compared at the dataset's own resolution
            let cases = raw_cases(cfg)?;
            cases
                .iter()
                .map(|c| {
                    let pred = mask_from_png(&dir.join(format!("{}.png", c.id)))?;
                    evaluate(&c.id, &pred, &c.mask, c.tags.clone())
                })
                .collect::<aunet::Result<_>>()?
        }
        (Some(ckpt), None) => {
            let model = load_checkpoint(cfg, ckpt)?;
            let samples = load_samples(cfg)?;
            evaluate_model(&model, &samples, cfg.eval.threshold, cfg.eval.batch_size)?
        }
        (None, None) => return Err(Error::Config("eval needs a checkpoint or a predictions directory".into()).into()),
    };
    output_dir(out)?;
    let echo = cfg.echo();
    let run_id = checkpoint
        .or(predictions)
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let report = MetricReport::build(run_id, vec![records], &cfg.eval.axes, echo.clone())?;
    report.write_csv(out.join("per_image.csv"))?;
    report.write_json(out.join("report.json"))?;
    let dsc_values: Vec<f64> = report.runs[0].iter().map(|r| r.dsc).collect();
    let hau_values: Vec<f64> = report.runs[0].iter().map(|r| r.hau).collect();
    write_ecdf_csv(out.join("ecdf_dsc.csv"), &ecdf(&dsc_values), &echo)?;
    write_ecdf_csv(out.join("ecdf_hau.csv"), &ecdf(&hau_values), &echo)?;
    Ok(report)
}

pub fn describe(report: &MetricReport) -> String {
    let mut s = String::new();
    for row in &report.aggregates {
        let _ = writeln!(
            s,
            "{}={} (n={}): DSC {:.4}±{:.4} SEN {:.4}±{:.4} dA {:.4}±{:.4} HAU {:.3}±{:.3}",
            row.axis,
            row.value,
            row.count,
            row.dsc_mean,
            row.dsc_sd,
            row.sen_mean,
            row.sen_sd,
            row.da_mean,
            row.da_sd,
            row.hau_mean,
            row.hau_sd
        );
    }
    s
}

/// Paths written by [`cmd_predict`].
pub struct Prediction {
    pub mask: PathBuf,
    pub overlay: PathBuf,
    pub dsc: Option<f64>,
}

pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    gt: Option<&Path>,
    out: &Path,
) -> anyhow::Result<Prediction> {
    let model = load_checkpoint(cfg, checkpoint)?;
    let img = read_png(image)?;
    let mask = match gt {
        Some(p) => mask_from_png(p)?,
        None => Mask::empty(img.h, img.w),
    };
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let case = RawCase::new(stem.clone(), img, mask, Tags::default())?;
    let sample = to_sample(cfg, &case)?;
    let p = model.predict(&sample.image)?;
    let pred = binarize(&p, 0, cfg.eval.threshold)?;
    let gt_mask = gt.map(|_| Mask::from_tensor(&sample.mask, 0)).transpose()?;
    let score = gt_mask
        .as_ref()
        .map(|g| confusion(&pred, g).map(|c| dsc(&c)))
        .transpose()?;

    output_dir(out)?;
    let echo = cfg.echo();
    let size = cfg.data.size;
    let mask_path = out.join(format!("{stem}_mask.png"));
    let bytes: Vec<u8> = pred.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(&mask_path, size, size, Pixels::Gray(&bytes), &echo)?;
    let gray = Rgb::from_gray(size, size, &sample.image.data()[..size * size]);
    let over = overlay(&gray, &pred, gt_mask.as_ref(), score);
    let overlay_path = out.join(format!("{stem}_overlay.png"));
    write_png(&overlay_path, size, size, Pixels::Rgb(&over), &echo)?;
    Ok(Prediction {
        mask: mask_path,
        overlay: overlay_path,
        dsc: score,
    })
}

pub fn grid_file_stem(grid: AblationGrid) -> &'static str {
    match grid {
        AblationGrid::Backbone => "ablation_backbone",
        AblationGrid::ReductionRatio => "ablation_ratio",
    }
}

pub fn cmd_ablate(cfg: &RunConfig, grid: AblationGrid, out: &Path) -> anyhow::Result<String> {
    let samples = load_samples(cfg)?;
    output_dir(out)?;
    let table = run_ablation(grid, &samples, &cfg.crossval, &cfg.train, &cfg.model);
    let stem = grid_file_stem(grid);
    table.write(&out.join(format!("{stem}.csv")), &out.join(format!("{stem}.json")))?;
    let failed = table.rows.iter().filter(|r| r.metrics.is_none()).count();
    let mut text = table.to_csv();
    if failed > 0 {
        let _ = writeln!(text, "{failed} of {} cells failed", table.rows.len());
    }
    Ok(text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StatMetric {
    Dsc,
    Sen,
    DeltaA,
    Hau,
}

impl StatMetric {
    fn get(self) -> fn(&MetricRecord) -> f64 {
        match self {
            StatMetric::Dsc => |r| r.dsc,
            StatMetric::Sen => |r| r.sen,
            StatMetric::DeltaA => |r| r.delta_a,
            StatMetric::Hau => |r| r.hau,
        }
    }
}

/// Paired test on the per-image metric (averaged over runs) of two reports.
pub fn cmd_stats(a: &Path, b: &Path, metric: StatMetric) -> anyhow::Result<String> {
    let ra = MetricReport::read_json(a)?;
    let rb = MetricReport::read_json(b)?;
    let (pa, pb) = (ra.per_image(metric.get()), rb.per_image(metric.get()));
    let ids_a: Vec<&str> = pa.iter().map(|(id, _)| id.as_str()).collect();
    let ids_b: Vec<&str> = pb.iter().map(|(id, _)| id.as_str()).collect();
    if ids_a != ids_b {
        return Err(Error::Invalid(format!(
            "{} and {} cover different images ({} vs {})",
            a.display(),
            b.display(),
            ids_a.len(),
            ids_b.len()
        ))
        .into());
    }
    let xa: Vec<f64> = pa.iter().map(|(_, v)| *v).collect();
    let xb: Vec<f64> = pb.iter().map(|(_, v)| *v).collect();
    let w = wilcoxon_signed_rank(&xa, &xb)?;
    let significant = if w.p_value < 0.05 { "yes" } else { "no" };
    Ok(format!(
        "metric {metric:?}, n = {} ({} non-zero), method {:?}\nW = {}\np = {}\nsignificant at 0.05: {significant}",
        xa.len(),
        w.n,
        w.method,
        w.statistic,
        w.p_value
    ))
}

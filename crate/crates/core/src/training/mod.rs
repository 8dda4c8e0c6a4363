//! Optimizer, learning-rate schedule, the training loop, evaluation, and
//! the cross-validation and ablation drivers.

mod experiments;
mod optim;

pub use experiments::{
    run_ablation, run_crossval, AblationGrid, AblationRow, AblationTable, CrossvalConfig, CrossvalResult,
    ABLATION_HEADER, REDUCTION_RATIOS,
};
pub use optim::{Amsgrad, BETA1, BETA2, EPS};

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegmentationSample;
use crate::losses::{combined, LossConfig};
use crate::metrics::{binarize, evaluate, Mask, MetricRecord, DEFAULT_THRESHOLD};
use crate::network::{read_model_body, write_model_body, BinReader, BinWriter, Model};
use crate::substrate::{Graph, Tensor4};
use crate::{csv_footer, Error, Result};

/// Piecewise-constant learning rate: `rates[i]` for `spans[i]` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub spans: Vec<usize>,
    pub rates: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            spans: vec![40, 30, 30, 20],
            rates: vec![1e-4, 5e-5, 1e-5, 1e-6],
        }
    }
}

impl Schedule {
    pub fn constant(epochs: usize, rate: f64) -> Self {
        Schedule {
            spans: vec![epochs],
            rates: vec![rate],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spans.is_empty() || self.spans.len() != self.rates.len() {
            return Err(Error::Config(format!(
                "schedule needs equally many spans and rates, got {} and {}",
                self.spans.len(),
                self.rates.len()
            )));
        }
        if self.spans.contains(&0) {
            return Err(Error::Config("schedule spans must be positive".into()));
        }
        if self.rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.rates.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("learning rates must not increase".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.spans.iter().sum()
    }

    /// Epochs at which a new rate starts.
    pub fn breakpoints(&self) -> Vec<usize> {
        self.spans
            .iter()
            .scan(0, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .take(self.spans.len() - 1)
            .collect()
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        let mut end = 0;
        for (span, rate) in self.spans.iter().zip(&self.rates) {
            end += span;
            if epoch < end {
                return Ok(*rate);
            }
        }
        Err(Error::Invalid(format!(
            "epoch {epoch} is past the {end}-epoch schedule"
        )))
    }
}

fn default_batch() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub schedule: Schedule,
    /// Shuffle seed for epoch `e` is `seed + e`.
    #[serde(default)]
    pub seed: u64,
    /// Recorded with the run. Reductions are ordered regardless of thread
    /// count, so results are reproducible either way.
    #[serde(default)]
    pub deterministic: bool,
    /// Save the training state every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Start from these weights (fine-tuning).
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    /// Evaluate the validation set every this many epochs.
    #[serde(default)]
    pub validate_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            loss: LossConfig::default(),
            schedule: Schedule::default(),
            seed: 0,
            deterministic: false,
            checkpoint_every: None,
            checkpoint_dir: None,
            init_from: None,
            validate_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) || self.validate_every == Some(0) {
            return Err(Error::Config("cadences must be at least 1 epoch".into()));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpoint_every needs checkpoint_dir".into()));
        }
        self.loss.validate()?;
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean combined loss over the epoch's samples.
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_csv(&self, config: &serde_json::Value) -> String {
        let mut text = String::from("epoch,lr,train_loss,val_dsc\n");
        for e in &self.epochs {
            let val = e.val_dsc.map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.train_loss, val));
        }
        text.push_str(&csv_footer(config));
        text
    }
}

/// Stacks samples `idx` into an image batch and a mask batch.
pub fn make_batch(samples: &[SegmentationSample], idx: &[usize]) -> Result<(Tensor4, Tensor4)> {
    let images: Vec<&Tensor4> = idx.iter().map(|&i| &samples[i].image).collect();
    let masks: Vec<&Tensor4> = idx.iter().map(|&i| &samples[i].mask).collect();
    Ok((Tensor4::stack(&images)?, Tensor4::stack(&masks)?))
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        order.swap(i, j);
    }
    order
}

/// Loss and parameter gradients for one batch, written into the store.
pub fn batch_gradients(model: &mut Model, images: &Tensor4, masks: &Tensor4, loss: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let (p, vars) = model.forward_train(&mut g, x)?;
    let l = combined(&mut g, p, masks, loss)?;
    let value = g.value(l).data()[0];
    let mut grads = g.backward(l, None)?;
    model.store_mut().load_grads(&mut grads, &vars);
    Ok(value)
}

/// Everything needed to continue a run bit for bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optim: Amsgrad,
    /// Epochs completed.
    pub epoch: usize,
    pub history: History,
}

pub const STATE_MAGIC: &[u8; 8] = b"AUNETTRN";

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(STATE_MAGIC);
        write_model_body(&mut w, &self.model);
        w.u64(self.epoch as u64);
        w.u64(self.optim.t);
        for (name, v) in [
            ("beta1", self.optim.beta1),
            ("beta2", self.optim.beta2),
            ("eps", self.optim.eps),
        ] {
            w.str(name);
            w.f64s(&[v]);
        }
        w.u32(self.optim.m.len() as u32);
        for k in 0..self.optim.m.len() {
            w.tensor(&self.optim.m[k]);
            w.tensor(&self.optim.v[k]);
            w.tensor(&self.optim.v_max[k]);
        }
        w.str(&serde_json::to_string(&self.history).expect("history serializes"));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::open(bytes, STATE_MAGIC)?;
        let model = read_model_body(&mut r)?;
        let epoch = r.u64()? as usize;
        let t = r.u64()?;
        let mut hyper = [0.0; 3];
        for h in &mut hyper {
            r.str()?;
            *h = r.f64s(1)?[0];
        }
        let n = r.u32()? as usize;
        if n != model.store().len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {n} tensors for a model with {}",
                model.store().len()
            )));
        }
        let (mut m, mut v, mut v_max) = (vec![], vec![], vec![]);
        for p in model.store().params() {
            for dst in [&mut m, &mut v, &mut v_max] {
                let t = r.tensor()?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state shape mismatch at {}",
                        p.name
                    )));
                }
                dst.push(t);
            }
        }
        let history: History =
            serde_json::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("history: {e}")))?;
        r.expect_end()?;
        Ok(TrainState {
            model,
            optim: Amsgrad {
                beta1: hyper[0],
                beta2: hyper[1],
                eps: hyper[2],
                t,
                m,
                v,
                v_max,
            },
            epoch,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Copies weights from `path` into `model`; the architectures must agree.
pub fn load_initial_weights(model: &mut Model, path: &Path) -> Result<()> {
    let init = Model::load(path)?;
    let (mut a, mut b) = (init.config().clone(), model.config().clone());
    a.seed = 0;
    b.seed = 0;
    if a != b {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} model but the run configures {}",
            path.display(),
            init.name(),
            model.name()
        )));
    }
    *model.store_mut() = init.store().clone();
    Ok(())
}

/// Trains `model` through the whole schedule. On a non-finite loss or
/// gradient the model is restored to the end of the last completed epoch
/// and `Error::Diverged` is returned.
pub fn train(
    model: &mut Model,
    data: &[SegmentationSample],
    val: Option<&[SegmentationSample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if let Some(path) = &cfg.init_from {
        load_initial_weights(model, path)?;
    }
    let batch = if cfg.batch_size > data.len() {
        warn!(
            "batch size {} exceeds {} training samples; shrinking",
            cfg.batch_size,
            data.len()
        );
        data.len()
    } else {
        cfg.batch_size
    };
    let mut optim = Amsgrad::new(model.store());
    let mut history = History::default();
    for epoch in 0..cfg.schedule.total_epochs() {
        let lr = cfg.schedule.lr_at(epoch)?;
        let good = (model.store().clone(), optim.clone());
        let order = shuffled(data.len(), cfg.seed.wrapping_add(epoch as u64));
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let (x, y) = make_batch(data, idx)?;
            let step = batch_gradients(model, &x, &y, &cfg.loss).and_then(|loss| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite { context: "loss".into() });
                }
                optim.step(model.store_mut(), lr)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => total += loss * idx.len() as f64,
                Err(e @ Error::NonFinite { .. }) => {
                    *model.store_mut() = good.0;
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("{e}; weights restored to the end of epoch {}", epoch as i64 - 1),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let val_dsc = match (val, cfg.validate_every) {
            (Some(v), Some(every)) if (epoch + 1) % every == 0 && !v.is_empty() => {
                let recs = evaluate_model(model, v, DEFAULT_THRESHOLD, batch)?;
                Some(recs.iter().map(|r| r.dsc).sum::<f64>() / recs.len() as f64)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / data.len() as f64,
            val_dsc,
        };
        info!("epoch {epoch}: lr {lr:e} loss {:.5}", record.train_loss);
        on_epoch(&record);
        history.epochs.push(record);
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                let state = TrainState {
                    model: model.clone(),
                    optim: optim.clone(),
                    epoch: epoch + 1,
                    history: history.clone(),
                };
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                state.save(dir.join("train_state.bin"))?;
            }
        }
    }
    Ok(TrainState {
        model: model.clone(),
        optim,
        epoch: cfg.schedule.total_epochs(),
        history,
    })
}

/// Per-image metrics of the thresholded eval-mode predictions.
pub fn evaluate_model(
    model: &Model,
    samples: &[SegmentationSample],
    threshold: f64,
    batch: usize,
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = make_batch(samples, chunk)?;
        let p = model.predict(&x)?;
        for (k, &i) in chunk.iter().enumerate() {
            let pred = binarize(&p, k, threshold)?;
            let gt = Mask::from_tensor(&samples[i].mask, 0)?;
            let rec = evaluate(&samples[i].id, &pred, &gt, samples[i].tags.clone())
                .map_err(|e| Error::Invalid(format!("{}: {e}", samples[i].id)))?;
            out.push(rec);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

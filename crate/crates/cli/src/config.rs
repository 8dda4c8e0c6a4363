use std::path::{Path, PathBuf};

use aunet::data::SynthParams;
use aunet::metrics::{Axis, DEFAULT_THRESHOLD};
use aunet::network::{ModelConfig, DESK_BASE_WIDTH};
use aunet::training::{CrossvalConfig, TrainConfig};
use aunet::Error;
use serde::{Deserialize, Serialize};

fn default_model() -> ModelConfig {
    ModelConfig::aunet(DESK_BASE_WIDTH)
}

/// One TOML document drives every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every seed below when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub crossval: CrossvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            model: default_model(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            crossval: CrossvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory with `images/`, `masks/` and optional `meta.csv`.
    pub root: Option<PathBuf>,
    /// Synthetic cases, used when `root` is absent.
    pub synth: Option<SynthParams>,
    /// Number of synthetic cases.
    pub count: usize,
    /// Network input side.
    pub size: usize,
    /// Background-crop threshold; no crop when absent.
    pub crop_tau: Option<f64>,
    /// Train and evaluate on enlarged mass patches instead of whole images.
    pub mass_patch: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            synth: None,
            count: 8,
            size: 64,
            crop_tau: None,
            mass_patch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub axes: Vec<Axis>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_THRESHOLD,
            axes: vec![Axis::Overall],
            batch_size: 4,
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.root.as_mut().map(resolve);
        cfg.train.checkpoint_dir.as_mut().map(resolve);
        cfg.train.init_from.as_mut().map(resolve);
        Ok(cfg)
    }

    /// Applies command-line overrides and the single seed, then validates.
    pub fn finalize(mut self, seed: Option<u64>, deterministic: bool) -> anyhow::Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.train.seed = s;
            self.crossval.fold_seed = s;
            if let Some(p) = self.data.synth.as_mut() {
                p.seed = s;
            }
        }
        if deterministic {
            self.train.deterministic = true;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> aunet::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.root.is_some() && self.data.synth.is_some() {
            return Err(Error::Config("data.root and data.synth are mutually exclusive".into()));
        }
        if self.data.root.is_none() && self.data.count == 0 {
            return Err(Error::Config("data.count must be at least 1".into()));
        }
        if let Some(p) = &self.data.synth {
            p.validate()?;
        }
        if let Some(t) = self.data.crop_tau {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("data.crop_tau {t} must lie in [0, 1)")));
            }
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval.threshold {} must lie in (0, 1)",
                self.eval.threshold
            )));
        }
        if self.eval.axes.is_empty() || self.eval.batch_size == 0 {
            return Err(Error::Config(
                "eval needs at least one axis and a positive batch size".into(),
            ));
        }
        Ok(())
    }

    pub fn synth_params(&self) -> SynthParams {
        self.data.synth.clone().unwrap_or_else(|| SynthParams {
            size: self.data.size,
            seed: self.seed.unwrap_or(0),
            ..SynthParams::default()
        })
    }

    /// The configuration as echoed into every output.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

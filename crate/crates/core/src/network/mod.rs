//! Five-level encoder–decoder backbones over any unit combination, with
//! BU or AU decoder fusion and a 1×1 sigmoid head.

mod checkpoint;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{AuBlock, BuBlock, ConvLayer, Ctx, DecoderStage, Unit, UnitKind, UpsamplerKind};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::substrate::{conv2d, max_pool2, sigmoid, Graph, Tensor4, Var};

pub(crate) use checkpoint::{read_model_body, write_model_body, BinReader, BinWriter};

/// Encoder blocks; all but the last are followed by 2×2 max pooling.
pub const DEPTH: usize = 5;
/// Total downsampling factor of the encoder.
pub const DOWNSAMPLE: usize = 1 << (DEPTH - 1);
pub const DEFAULT_BASE_WIDTH: usize = 64;
pub const DESK_BASE_WIDTH: usize = 8;
pub const DEFAULT_REDUCTION_RATIO: usize = 16;

fn default_width() -> usize {
    DEFAULT_BASE_WIDTH
}

fn default_ratio() -> usize {
    DEFAULT_REDUCTION_RATIO
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_unit: UnitKind,
    pub decoder_unit: UnitKind,
    pub upsampler: UpsamplerKind,
    /// Channels at full resolution; level `l` has `base_width·2^l`.
    #[serde(default = "default_width")]
    pub base_width: usize,
    #[serde(default = "default_ratio")]
    pub reduction_ratio: usize,
    #[serde(default)]
    pub unit_batch_norm: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Res encoder, basic decoder, AU blocks with r = 16.
    pub fn aunet(base_width: usize) -> Self {
        ModelConfig {
            encoder_unit: UnitKind::Res,
            decoder_unit: UnitKind::Basic,
            upsampler: UpsamplerKind::Au,
            base_width,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            unit_batch_norm: false,
            seed: 0,
        }
    }

    /// The symmetric basic/basic backbone with BU blocks.
    pub fn unet(base_width: usize) -> Self {
        ModelConfig {
            encoder_unit: UnitKind::Basic,
            decoder_unit: UnitKind::Basic,
            upsampler: UpsamplerKind::Bu,
            ..Self::aunet(base_width)
        }
    }

    pub fn backbone(encoder: UnitKind, decoder: UnitKind, upsampler: UpsamplerKind, base_width: usize) -> Self {
        ModelConfig {
            encoder_unit: encoder,
            decoder_unit: decoder,
            upsampler,
            ..Self::aunet(base_width)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ratio(mut self, r: usize) -> Self {
        self.reduction_ratio = r;
        self
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.upsampler == UpsamplerKind::Au {
            let r = self.reduction_ratio;
            for level in 0..DEPTH - 1 {
                let ch = 2 * self.width(level);
                if r == 0 || !ch.is_multiple_of(r) {
                    return Err(Error::Config(format!(
                        "reduction ratio {r} does not divide the {ch} attention channels at level {level} \
                         (base_width {})",
                        self.base_width
                    )));
                }
            }
        }
        Ok(())
    }

    /// `<Enc>-<Dec>-UNet`, with `+AU` for AU decoders; the basic/basic BU
    /// backbone is the plain "UNet (Basic-Basic)".
    pub fn name(&self) -> String {
        if self.encoder_unit == UnitKind::Basic
            && self.decoder_unit == UnitKind::Basic
            && self.upsampler == UpsamplerKind::Bu
        {
            return "UNet (Basic-Basic)".to_string();
        }
        let mut s = format!("{}-{}-UNet", self.encoder_unit.title(), self.decoder_unit.title());
        if self.upsampler == UpsamplerKind::Au {
            s.push_str("+AU");
        }
        s
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let bn = |c: usize| if self.unit_batch_norm { 2 * c } else { 0 };
        let unit = |kind: UnitKind, cin: usize, cout: usize| {
            conv(cin, cout, 3) + (kind.conv_count() - 1) * conv(cout, cout, 3) + kind.conv_count() * bn(cout)
        };
        let mut total = 0;
        for level in 0..DEPTH {
            let cin = if level == 0 { 3 } else { self.width(level - 1) };
            total += unit(self.encoder_unit, cin, self.width(level));
        }
        for level in 0..DEPTH - 1 {
            let n = self.width(level);
            total += match self.upsampler {
                UpsamplerKind::Bu => conv(2 * n, n, 3),
                UpsamplerKind::Au => {
                    let hidden = 2 * n / self.reduction_ratio;
                    conv(2 * n, 4 * n, 3)
                        + 2 * 4 * n
                        + conv(2 * n, n, 3)
                        + 2 * n
                        + conv(n, n, 3)
                        + 2 * n
                        + conv(2 * n, hidden, 1)
                        + conv(hidden, 2 * n, 1)
                }
            };
            total += unit(self.decoder_unit, 2 * n, n);
        }
        total + conv(self.base_width, 1, 1)
    }
}

/// Layer structure of a built model; parameters live in the store.
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Vec<Unit>,
    /// Indexed by the level whose resolution the stage restores.
    pub decoder: Vec<DecoderStage>,
    pub head: ConvLayer,
}

impl Network {
    fn build(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bn = config.unit_batch_norm;
        let mut encoder = Vec::with_capacity(DEPTH);
        for level in 0..DEPTH {
            let cin = if level == 0 { 3 } else { config.width(level - 1) };
            encoder.push(Unit::new(
                store,
                &mut rng,
                &format!("enc{level}"),
                config.encoder_unit,
                cin,
                config.width(level),
                bn,
            )?);
        }
        let mut decoder = Vec::with_capacity(DEPTH - 1);
        for level in 0..DEPTH - 1 {
            let n = config.width(level);
            let name = format!("dec{level}");
            decoder.push(match config.upsampler {
                UpsamplerKind::Bu => DecoderStage::Bu {
                    block: BuBlock::new(store, &mut rng, &format!("{name}.bu"), 2 * n, n)?,
                    unit: Unit::new(
                        store,
                        &mut rng,
                        &format!("{name}.unit"),
                        config.decoder_unit,
                        2 * n,
                        n,
                        bn,
                    )?,
                },
                UpsamplerKind::Au => DecoderStage::Au(AuBlock::new(
                    store,
                    &mut rng,
                    &format!("{name}.au"),
                    2 * n,
                    n,
                    config.reduction_ratio,
                    config.decoder_unit,
                    bn,
                )?),
            });
        }
        let head = ConvLayer::new(store, &mut rng, "head", config.base_width, 1, 1, false, false)?;
        // The head feeds a sigmoid, not a ReLU, so use unit gain instead of He's factor 2.
        let w = store.get(head.weight).value.scaled(std::f64::consts::FRAC_1_SQRT_2);
        store.set("head.weight", w)?;
        Ok(Network { encoder, decoder, head })
    }

    /// Returns the probability map and the five encoder feature maps
    /// (pre-pooling, finest first).
    pub fn forward_features(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = ctx.graph.value(x).shape();
        if shape.c() != 3 {
            return Err(Error::shape(
                "forward",
                format!("expected 3 input channels, got {shape}"),
            ));
        }
        if !shape.h().is_multiple_of(DOWNSAMPLE) || !shape.w().is_multiple_of(DOWNSAMPLE) {
            return Err(Error::shape(
                "forward",
                format!("spatial size of {shape} must be divisible by {DOWNSAMPLE}"),
            ));
        }
        let mut features = Vec::with_capacity(DEPTH);
        let mut h = x;
        for (level, unit) in self.encoder.iter().enumerate() {
            if level > 0 {
                h = max_pool2(ctx.graph, h)?;
            }
            h = unit.forward(ctx, h)?;
            features.push(h);
        }
        for (level, stage) in self.decoder.iter().enumerate().rev() {
            h = stage.forward(ctx, h, features[level])?;
        }
        let (w, b) = (ctx.param(self.head.weight), ctx.param(self.head.bias));
        let logits = conv2d(ctx.graph, h, w, Some(b), 0, 1)?;
        Ok((sigmoid(ctx.graph, logits)?, features))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.forward_features(ctx, x).map(|(p, _)| p)
    }
}

/// A built network: configuration, layer structure and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    network: Network,
    store: ParamStore,
}

impl Model {
    /// Deterministic from `config.seed`: He-normal conv/FC weights, zero
    /// biases, γ = 1, β = 0.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let network = Network::build(&config, &mut store)?;
        Ok(Model { config, network, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn name(&self) -> String {
        self.config.name()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Train-mode forward; updates batch-norm running stats. Returns the
    /// output and the parameter leaves (store order).
    pub fn forward_train(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let vars = self.store.bind(g);
        let mut ctx = Ctx::train(g, &vars, self.store.stats_mut());
        let out = self.network.forward(&mut ctx, x)?;
        Ok((out, vars))
    }

    pub fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let vars = self.store.bind(g);
        let mut ctx = Ctx::eval(g, &vars, self.store.stats());
        let out = self.network.forward(&mut ctx, x)?;
        Ok((out, vars))
    }

    /// Eval-mode probability map for a (n, 3, H, W) batch.
    pub fn predict(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_eval(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn bitwise_eq(&self, other: &Model) -> bool {
        self.config == other.config && self.store.bitwise_eq(&other.store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode_model(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode_model(bytes)
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

#[cfg(test)]
mod tests;

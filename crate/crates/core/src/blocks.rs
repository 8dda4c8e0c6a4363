//! Network building blocks: conv units, channel attention, dense
//! upsampling, and the two decoder fusion blocks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{he_normal, NamedStats, ParamId, ParamStore, StatsId};
use crate::substrate::{
    add, batch_norm, bilinear_up2, concat_channels, conv2d, global_avg_pool, pixel_shuffle2, relu, scale_channels,
    sigmoid, Graph, NormMode, Tensor4, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Basic,
    Deep,
    Res,
}

impl UnitKind {
    pub const ALL: [UnitKind; 3] = [UnitKind::Basic, UnitKind::Deep, UnitKind::Res];

    pub fn conv_count(self) -> usize {
        match self {
            UnitKind::Basic => 2,
            UnitKind::Deep | UnitKind::Res => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Basic => "basic",
            UnitKind::Deep => "deep",
            UnitKind::Res => "res",
        }
    }

    /// Capitalised form used in model names.
    pub fn title(self) -> &'static str {
        match self {
            UnitKind::Basic => "Basic",
            UnitKind::Deep => "Deep",
            UnitKind::Res => "Res",
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(UnitKind::Basic),
            "deep" => Ok(UnitKind::Deep),
            "res" => Ok(UnitKind::Res),
            other => Err(Error::Config(format!(
                "unknown unit kind {other:?}, expected basic | deep | res"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsamplerKind {
    Bu,
    Au,
}

impl UpsamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UpsamplerKind::Bu => "bu",
            UpsamplerKind::Au => "au",
        }
    }
}

impl fmt::Display for UpsamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UpsamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bu" => Ok(UpsamplerKind::Bu),
            "au" => Ok(UpsamplerKind::Au),
            other => Err(Error::Config(format!("unknown upsampler {other:?}, expected bu | au"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum StatsAccess<'a> {
    Train(&'a mut [NamedStats]),
    Eval(&'a [NamedStats]),
}

/// Everything a block needs during one forward pass: the tape, the bound
/// parameter leaves (in store order) and the batch-norm state.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    params: &'a [Var],
    stats: StatsAccess<'a>,
}

impl<'a> Ctx<'a> {
    pub fn train(graph: &'a mut Graph, params: &'a [Var], stats: &'a mut [NamedStats]) -> Self {
        Ctx {
            graph,
            params,
            stats: StatsAccess::Train(stats),
        }
    }

    pub fn eval(graph: &'a mut Graph, params: &'a [Var], stats: &'a [NamedStats]) -> Self {
        Ctx {
            graph,
            params,
            stats: StatsAccess::Eval(stats),
        }
    }

    pub fn mode(&self) -> Mode {
        match self.stats {
            StatsAccess::Train(_) => Mode::Train,
            StatsAccess::Eval(_) => Mode::Eval,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    fn norm(&mut self, x: Var, layer: &NormLayer) -> Result<Var> {
        let (gamma, beta) = (self.param(layer.gamma), self.param(layer.beta));
        let mode = match &mut self.stats {
            StatsAccess::Train(s) => NormMode::Train(&mut s[layer.stats.0].stats),
            StatsAccess::Eval(s) => NormMode::Eval(&s[layer.stats.0].stats),
        };
        batch_norm(self.graph, x, gamma, beta, mode)
    }
}

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

/// Same-resolution convolution (padding k/2), optionally followed by
/// batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<NormLayer>,
    pub relu: bool,
    pub kernel: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        norm: bool,
        relu: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_normal([cout, cin, kernel, kernel], rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor4::zeros([1, cout, 1, 1]))?;
        let norm = if norm {
            Some(NormLayer {
                gamma: store.add(format!("{name}.bn.gamma"), Tensor4::full([1, cout, 1, 1], 1.0))?,
                beta: store.add(format!("{name}.bn.beta"), Tensor4::zeros([1, cout, 1, 1]))?,
                stats: store.add_stats(format!("{name}.bn"), cout),
            })
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            norm,
            relu,
            kernel,
        })
    }

    /// Convolution and optional norm, without the activation.
    pub fn pre_activation(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = conv2d(ctx.graph, x, w, Some(b), self.kernel / 2, 1)?;
        match &self.norm {
            Some(n) => ctx.norm(y, n),
            None => Ok(y),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.pre_activation(ctx, x)?;
        if self.relu {
            relu(ctx.graph, y)
        } else {
            Ok(y)
        }
    }
}

/// Basic (2 convs), deep (3 convs) or res (3 convs plus a skip from the
/// first conv's pre-activation) unit. All convs are 3×3.
#[derive(Clone, Debug)]
pub struct Unit {
    pub kind: UnitKind,
    pub convs: Vec<ConvLayer>,
}

impl Unit {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: UnitKind,
        cin: usize,
        cout: usize,
        batch_norm: bool,
    ) -> Result<Self> {
        let convs = (0..kind.conv_count())
            .map(|i| {
                let c_in = if i == 0 { cin } else { cout };
                ConvLayer::new(
                    store,
                    rng,
                    &format!("{name}.conv{}", i + 1),
                    c_in,
                    cout,
                    3,
                    batch_norm,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Unit { kind, convs })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self.kind {
            UnitKind::Basic | UnitKind::Deep => self.convs.iter().try_fold(x, |h, conv| conv.forward(ctx, h)),
            UnitKind::Res => {
                let skip = self.convs[0].pre_activation(ctx, x)?;
                let h = relu(ctx.graph, skip)?;
                let h = self.convs[1].forward(ctx, h)?;
                let h = self.convs[2].pre_activation(ctx, h)?;
                let sum = add(ctx.graph, h, skip)?;
                relu(ctx.graph, sum)
            }
        }
    }
}

/// Squeeze-and-excitation style channel gate: two fully connected layers
/// (ReLU between, sigmoid after) over the spatially pooled descriptor.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    /// (channels/r, channels, 1, 1)
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    /// (channels, channels/r, 1, 1)
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub channels: usize,
    pub ratio: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Config(format!(
                "reduction ratio {ratio} does not divide {channels} attention channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(ChannelAttention {
            fc1_weight: store.add(format!("{name}.fc1.weight"), he_normal([hidden, channels, 1, 1], rng))?,
            fc1_bias: store.add(format!("{name}.fc1.bias"), Tensor4::zeros([1, hidden, 1, 1]))?,
            fc2_weight: store.add(format!("{name}.fc2.weight"), he_normal([channels, hidden, 1, 1], rng))?,
            fc2_bias: store.add(format!("{name}.fc2.bias"), Tensor4::zeros([1, channels, 1, 1]))?,
            channels,
            ratio,
        })
    }

    /// Per-(sample, channel) gate values in (0, 1), shape (n, c, 1, 1).
    pub fn weights(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.graph.value(x).shape().c();
        if c != self.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("input has {c} channels, attention built for {}", self.channels),
            ));
        }
        let z = global_avg_pool(ctx.graph, x)?;
        let (w1, b1) = (ctx.param(self.fc1_weight), ctx.param(self.fc1_bias));
        let (w2, b2) = (ctx.param(self.fc2_weight), ctx.param(self.fc2_bias));
        let h = conv2d(ctx.graph, z, w1, Some(b1), 0, 1)?;
        let h = relu(ctx.graph, h)?;
        let s = conv2d(ctx.graph, h, w2, Some(b2), 0, 1)?;
        sigmoid(ctx.graph, s)
    }

    /// Rescales each channel of `x` by its gate.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = self.weights(ctx, x)?;
        scale_channels(ctx.graph, x, s)
    }
}

/// Dense upsampling convolution: 3×3 conv to `4n` channels followed by a
/// ×2 sub-pixel rearrangement to `n` channels.
pub fn duc_up2(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let cout = g.value(weight).shape().n();
    if !cout.is_multiple_of(4) {
        return Err(Error::shape(
            "duc_up2",
            format!("conv produces {cout} channels, not divisible by 4"),
        ));
    }
    let k = g.value(weight).shape().h();
    let y = conv2d(g, x, weight, Some(bias), k / 2, 1)?;
    pixel_shuffle2(g, y)
}

fn check_pair(op: &'static str, g: &Graph, high: Var, low: Var, low_channels: usize) -> Result<()> {
    let (hs, ls) = (g.value(high).shape(), g.value(low).shape());
    if hs.n() != ls.n() || hs.h() * 2 != ls.h() || hs.w() * 2 != ls.w() {
        return Err(Error::shape(
            op,
            format!("high-level features {hs} must be half the resolution of low-level {ls}"),
        ));
    }
    if ls.c() != low_channels {
        return Err(Error::shape(
            op,
            format!("low-level features {ls} should have {low_channels} channels"),
        ));
    }
    Ok(())
}

/// Bilinear upsampling block: `[conv(up(F_high)), F_low]`.
#[derive(Clone, Debug)]
pub struct BuBlock {
    pub conv: ConvLayer,
    pub channels: usize,
}

impl BuBlock {
    /// `high_channels` → `n` conv; output has `2n` channels.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        high_channels: usize,
        n: usize,
    ) -> Result<Self> {
        Ok(BuBlock {
            conv: ConvLayer::new(store, rng, &format!("{name}.conv"), high_channels, n, 3, false, false)?,
            channels: n,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, high: Var, low: Var) -> Result<Var> {
        check_pair("bu_block", ctx.graph, high, low, self.channels)?;
        let up = bilinear_up2(ctx.graph, high)?;
        let up = self.conv.forward(ctx, up)?;
        concat_channels(ctx.graph, up, low)
    }
}

/// Attention-guided dense-upsampling block.
///
/// ```text
/// F_duc    = shuffle(relu(bn(conv(F_high))))          n ch
/// F_buc    = relu(bn(conv(up(F_high))))               n ch
/// F_concat = [relu(bn(conv(F_duc + F_low))), F_buc]   2n ch
/// out      = unit(attention(F_concat))                n ch
/// ```
#[derive(Clone, Debug)]
pub struct AuBlock {
    pub duc: ConvLayer,
    pub buc: ConvLayer,
    pub fuse: ConvLayer,
    pub attention: ChannelAttention,
    pub unit: Unit,
    pub channels: usize,
}

impl AuBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        high_channels: usize,
        n: usize,
        ratio: usize,
        unit: UnitKind,
        unit_batch_norm: bool,
    ) -> Result<Self> {
        Ok(AuBlock {
            duc: ConvLayer::new(store, rng, &format!("{name}.duc"), high_channels, 4 * n, 3, true, true)?,
            buc: ConvLayer::new(store, rng, &format!("{name}.buc"), high_channels, n, 3, true, true)?,
            fuse: ConvLayer::new(store, rng, &format!("{name}.fuse"), n, n, 3, true, true)?,
            attention: ChannelAttention::new(store, rng, &format!("{name}.att"), 2 * n, ratio)?,
            unit: Unit::new(store, rng, &format!("{name}.unit"), unit, 2 * n, n, unit_batch_norm)?,
            channels: n,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, high: Var, low: Var) -> Result<Var> {
        check_pair("au_block", ctx.graph, high, low, self.channels)?;
        let stage = |name: &'static str| {
            move |e: Error| match e {
                Error::Shape { detail, .. } => Error::Shape {
                    op: "au_block",
                    detail: format!("{name}: {detail}"),
                },
                other => other,
            }
        };
        let duc = self.duc.forward(ctx, high).map_err(stage("duc conv"))?;
        let duc = pixel_shuffle2(ctx.graph, duc).map_err(stage("duc shuffle"))?;
        let up = bilinear_up2(ctx.graph, high).map_err(stage("bilinear"))?;
        let buc = self.buc.forward(ctx, up).map_err(stage("buc conv"))?;
        let sum = add(ctx.graph, duc, low).map_err(stage("sum"))?;
        let fused = self.fuse.forward(ctx, sum).map_err(stage("fuse conv"))?;
        let cat = concat_channels(ctx.graph, fused, buc).map_err(stage("concat"))?;
        let gated = self.attention.forward(ctx, cat).map_err(stage("attention"))?;
        self.unit.forward(ctx, gated).map_err(stage("unit"))
    }
}

/// One decoder level: fusion block plus decoder unit.
#[derive(Clone, Debug)]
pub enum DecoderStage {
    Bu {
        block: BuBlock,
        unit: Unit,
    },
    /// The AU block runs the decoder unit itself, after attention.
    Au(AuBlock),
}

impl DecoderStage {
    pub fn forward(&self, ctx: &mut Ctx<'_>, high: Var, low: Var) -> Result<Var> {
        match self {
            DecoderStage::Bu { block, unit } => {
                let cat = block.forward(ctx, high, low)?;
                unit.forward(ctx, cat)
            }
            DecoderStage::Au(block) => block.forward(ctx, high, low),
        }
    }
}

#[cfg(test)]
mod tests;

//! Elementwise and layout primitives.

use crate::error::{Error, Result};

use super::graph::{Backward, Graph, Var};
use super::tensor::{Shape4, Tensor4};

struct ReluRule;

impl Backward for ReluRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor4::from_raw(grad.shape(), data))]
    }
}

/// `max(0, x)`; the subgradient at 0 is 0.
pub fn relu(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.value(x);
    let out = xv.map(|v| if v > 0.0 { v } else { 0.0 });
    if g.tracks_kinks() {
        let words: Vec<u64> = xv
            .data()
            .chunks(64)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (((v > 0.0) as u64) << i))
            })
            .collect();
        g.note_kinks(words);
    }
    g.push("relu", out, &[x], ReluRule)
}

struct SigmoidRule;

impl Backward for SigmoidRule {
    fn backward(&self, _: &[&Tensor4], out: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        let data = out
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        vec![Some(Tensor4::from_raw(grad.shape(), data))]
    }
}

pub fn sigmoid(g: &mut Graph, x: Var) -> Result<Var> {
    let out = g.value(x).map(stable_sigmoid);
    g.push("sigmoid", out, &[x], SigmoidRule)
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct AddRule;

impl Backward for AddRule {
    fn backward(&self, _: &[&Tensor4], _: &Tensor4, grad: &Tensor4, wants: &[bool]) -> Vec<Option<Tensor4>> {
        wants.iter().map(|&w| w.then(|| grad.clone())).collect()
    }
}

pub fn add(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    if av.shape() != bv.shape() {
        return Err(Error::shape("add", format!("{} vs {}", av.shape(), bv.shape())));
    }
    let mut out = av.clone();
    out.add_assign(bv);
    g.push("add", out, &[a, b], AddRule)
}

struct ScaleRule(f64);

impl Backward for ScaleRule {
    fn backward(&self, _: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        vec![Some(grad.scaled(self.0))]
    }
}

/// Multiplies by a constant.
pub fn scale(g: &mut Graph, x: Var, k: f64) -> Result<Var> {
    let out = g.value(x).scaled(k);
    g.push("scale", out, &[x], ScaleRule(k))
}

struct ConcatRule {
    split: usize,
}

impl Backward for ConcatRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, wants: &[bool]) -> Vec<Option<Tensor4>> {
        let [n, c, h, w] = grad.shape().0;
        let plane = h * w;
        let ca = self.split;
        let cb = c - ca;
        let mut ga = wants[0].then(|| Vec::with_capacity(n * ca * plane));
        let mut gb = wants[1].then(|| Vec::with_capacity(n * cb * plane));
        for i in 0..n {
            let s = grad.sample(i);
            if let Some(ga) = ga.as_mut() {
                ga.extend_from_slice(&s[..ca * plane]);
            }
            if let Some(gb) = gb.as_mut() {
                gb.extend_from_slice(&s[ca * plane..]);
            }
        }
        vec![
            ga.map(|d| Tensor4::from_raw(inputs[0].shape(), d)),
            gb.map(|d| Tensor4::from_raw(inputs[1].shape(), d)),
        ]
    }
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    let [na, ca, ha, wa] = av.shape().0;
    let [nb, cb, hb, wb] = bv.shape().0;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape("concat", format!("{} vs {}", av.shape(), bv.shape())));
    }
    let mut data = Vec::with_capacity(av.len() + bv.len());
    for i in 0..na {
        data.extend_from_slice(av.sample(i));
        data.extend_from_slice(bv.sample(i));
    }
    let out = Tensor4::from_raw(Shape4::new(na, ca + cb, ha, wa), data);
    g.push("concat", out, &[a, b], ConcatRule { split: ca })
}

struct GapRule;

impl Backward for GapRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        let shape = inputs[0].shape();
        let plane = shape.plane();
        let inv = 1.0 / plane as f64;
        let mut data = Vec::with_capacity(shape.numel());
        for &gv in grad.data() {
            data.extend(std::iter::repeat_n(gv * inv, plane));
        }
        vec![Some(Tensor4::from_raw(shape, data))]
    }
}

/// Spatial mean per (sample, channel), giving (n, c, 1, 1).
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.value(x);
    let shape = xv.shape();
    let plane = shape.plane();
    let data = xv
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    let out = Tensor4::from_raw(Shape4::new(shape.n(), shape.c(), 1, 1), data);
    g.push("global_avg_pool", out, &[x], GapRule)
}

struct ChannelScaleRule;

impl Backward for ChannelScaleRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, wants: &[bool]) -> Vec<Option<Tensor4>> {
        let (x, s) = (inputs[0], inputs[1]);
        let plane = x.shape().plane();
        let dx = wants[0].then(|| {
            let mut d = grad.clone();
            for (chunk, &sv) in d.data_mut().chunks_mut(plane).zip(s.data()) {
                chunk.iter_mut().for_each(|v| *v *= sv);
            }
            d
        });
        let ds = wants[1].then(|| {
            let data = grad
                .data()
                .chunks(plane)
                .zip(x.data().chunks(plane))
                .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                .collect();
            Tensor4::from_raw(s.shape(), data)
        });
        vec![dx, ds]
    }
}

/// Multiplies channel `c` of sample `n` by `s[n, c]`; `s` is (n, c, 1, 1).
pub fn scale_channels(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    let (xv, sv) = (g.value(x), g.value(s));
    let [n, c, _, _] = xv.shape().0;
    if sv.shape() != Shape4::new(n, c, 1, 1) {
        return Err(Error::shape(
            "scale_channels",
            format!("feature map {} with weights {}", xv.shape(), sv.shape()),
        ));
    }
    let plane = xv.shape().plane();
    let mut out = xv.clone();
    for (chunk, &k) in out.data_mut().chunks_mut(plane).zip(sv.data()) {
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    g.push("scale_channels", out, &[x, s], ChannelScaleRule)
}

/// Sub-pixel channel-to-space rearrangement with factor 2:
/// `out(c, 2i+di, 2j+dj) = in(4c + 2di + dj, i, j)`.
pub fn pixel_shuffle2_tensor(x: &Tensor4) -> Result<Tensor4> {
    let [n, c4, h, w] = x.shape().0;
    if c4 % 4 != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{} channels not divisible by 4", c4),
        ));
    }
    let c = c4 / 4;
    let mut out = Tensor4::zeros(Shape4::new(n, c, 2 * h, 2 * w));
    for b in 0..n {
        for ch in 0..c {
            for di in 0..2 {
                for dj in 0..2 {
                    let src_c = ch * 4 + di * 2 + dj;
                    for i in 0..h {
                        for j in 0..w {
                            out.set(b, ch, 2 * i + di, 2 * j + dj, x.at(b, src_c, i, j));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle2_tensor`].
pub fn pixel_unshuffle2_tensor(x: &Tensor4) -> Result<Tensor4> {
    let [n, c, h2, w2] = x.shape().0;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("odd spatial size {}", x.shape()),
        ));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor4::zeros(Shape4::new(n, c * 4, h, w));
    for b in 0..n {
        for ch in 0..c {
            for di in 0..2 {
                for dj in 0..2 {
                    for i in 0..h {
                        for j in 0..w {
                            out.set(b, ch * 4 + di * 2 + dj, i, j, x.at(b, ch, 2 * i + di, 2 * j + dj));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

struct ShuffleRule;

impl Backward for ShuffleRule {
    fn backward(&self, _: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        vec![Some(
            pixel_unshuffle2_tensor(grad).expect("shuffle output has even extents"),
        )]
    }
}

pub fn pixel_shuffle2(g: &mut Graph, x: Var) -> Result<Var> {
    let out = pixel_shuffle2_tensor(g.value(x))?;
    g.push("pixel_shuffle", out, &[x], ShuffleRule)
}

struct WeightedSumRule(Tensor4);

impl Backward for WeightedSumRule {
    fn backward(&self, _: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        vec![Some(self.0.scaled(grad.data()[0]))]
    }
}

/// Scalar `Σ x·weights`; projects a tensor output onto a fixed direction.
pub fn weighted_sum(g: &mut Graph, x: Var, weights: &Tensor4) -> Result<Var> {
    let xv = g.value(x);
    if xv.shape() != weights.shape() {
        return Err(Error::shape(
            "weighted_sum",
            format!("{} vs {}", xv.shape(), weights.shape()),
        ));
    }
    let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
    let out = Tensor4::from_raw(Shape4::new(1, 1, 1, 1), vec![s]);
    g.push("weighted_sum", out, &[x], WeightedSumRule(weights.clone()))
}

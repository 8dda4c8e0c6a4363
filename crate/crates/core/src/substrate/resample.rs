//! Resolution-changing primitives: 2×2 max pooling and ×2 bilinear
//! upsampling.

use crate::error::{Error, Result};

use super::graph::{Backward, Graph, Var};
use super::tensor::{Shape4, Tensor4};

struct MaxPoolRule {
    /// Flat input index of each output's maximum.
    argmax: Vec<usize>,
}

impl Backward for MaxPoolRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        let mut dx = Tensor4::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        vec![Some(dx)]
    }
}

/// Non-overlapping 2×2 maximum. Ties go to the first element in
/// row-major window order.
pub fn max_pool2(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.value(x);
    let [n, c, h, w] = xv.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "max_pool2",
            format!("spatial size of {} must be even", xv.shape()),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let out_shape = Shape4::new(n, c, ho, wo);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let data = xv.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let cands = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if data[k] > data[best] {
                        best = k;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    if g.tracks_kinks() {
        let words: Vec<u64> = argmax.iter().map(|&a| a as u64).collect();
        g.note_kinks(words);
    }
    g.push(
        "max_pool2",
        Tensor4::from_raw(out_shape, out),
        &[x],
        MaxPoolRule { argmax },
    )
}

/// One output coordinate of a 1-D linear resize: `lo·(1−t) + hi·t`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

/// Half-pixel-centre sampling taps (align-corners = false) for resizing
/// `src` samples to `dst` samples. Source coordinates below 0 clamp to 0.
pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                t: pos - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn resize_plane(src: &[f64], h: usize, w: usize, rows: &[Tap], cols: &[Tap], dst: &mut [f64]) {
    let wo = cols.len();
    for (oy, ry) in rows.iter().enumerate() {
        let r0 = &src[ry.lo * w..(ry.lo + 1) * w];
        let r1 = &src[ry.hi * w..(ry.hi + 1) * w];
        for (ox, cx) in cols.iter().enumerate() {
            let top = r0[cx.lo] * (1.0 - cx.t) + r0[cx.hi] * cx.t;
            let bottom = r1[cx.lo] * (1.0 - cx.t) + r1[cx.hi] * cx.t;
            dst[oy * wo + ox] = top * (1.0 - ry.t) + bottom * ry.t;
        }
    }
    debug_assert!(src.len() >= h * w);
}

fn resize_plane_transpose(grad: &[f64], w: usize, rows: &[Tap], cols: &[Tap], dst: &mut [f64]) {
    let wo = cols.len();
    for (oy, ry) in rows.iter().enumerate() {
        for (ox, cx) in cols.iter().enumerate() {
            let g = grad[oy * wo + ox];
            let (a, b) = (g * (1.0 - ry.t), g * ry.t);
            dst[ry.lo * w + cx.lo] += a * (1.0 - cx.t);
            dst[ry.lo * w + cx.hi] += a * cx.t;
            dst[ry.hi * w + cx.lo] += b * (1.0 - cx.t);
            dst[ry.hi * w + cx.hi] += b * cx.t;
        }
    }
}

struct UpsampleRule {
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl Backward for UpsampleRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        let shape = inputs[0].shape();
        let (w, plane) = (shape.w(), shape.plane());
        let out_plane = grad.shape().plane();
        let mut dx = Tensor4::zeros(shape);
        for (gp, dp) in grad.data().chunks(out_plane).zip(dx.data_mut().chunks_mut(plane)) {
            resize_plane_transpose(gp, w, &self.rows, &self.cols, dp);
        }
        vec![Some(dx)]
    }
}

/// Bilinear ×2 upsampling with the align-corners = false convention.
pub fn bilinear_up2(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.value(x);
    let [n, c, h, w] = xv.shape().0;
    let rows = linear_taps(h, 2 * h);
    let cols = linear_taps(w, 2 * w);
    let out_shape = Shape4::new(n, c, 2 * h, 2 * w);
    let out_plane = out_shape.plane();
    let mut out = vec![0.0; out_shape.numel()];
    for (sp, dp) in xv.data().chunks(h * w).zip(out.chunks_mut(out_plane)) {
        resize_plane(sp, h, w, &rows, &cols, dp);
    }
    g.push(
        "bilinear_up2",
        Tensor4::from_raw(out_shape, out),
        &[x],
        UpsampleRule { rows, cols },
    )
}

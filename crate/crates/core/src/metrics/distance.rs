use super::Mask;
use crate::{Error, Result};

/// Which foreground pixels enter the Hausdorff distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HausdorffMode {
    #[default]
    AllPixels,
    /// Only foreground pixels with a 4-neighbour outside the mask or the image.
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hausdorff {
    /// Distance in pixels, or the image diagonal when `sentinel` is set.
    pub value: f64,
    /// Either mask was empty.
    pub sentinel: bool,
}

/// Symmetric Hausdorff distance between foreground pixel sets, in pixels.
pub fn hausdorff(pred: &Mask, gt: &Mask, mode: HausdorffMode) -> Result<Hausdorff> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::shape(
            "hausdorff",
            format!("prediction {}x{} vs ground truth {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    let (a, b) = match mode {
        HausdorffMode::AllPixels => (pred.clone(), gt.clone()),
        HausdorffMode::Boundary => (boundary(pred), boundary(gt)),
    };
    if a.is_empty() || b.is_empty() {
        return Ok(Hausdorff {
            value: pred.diagonal(),
            sentinel: true,
        });
    }
    let value = directed_sq(&a, &b).max(directed_sq(&b, &a)).sqrt();
    Ok(Hausdorff { value, sentinel: false })
}

/// `max_{p∈a} min_{q∈b} |p−q|²` via the distance transform of `b`.
fn directed_sq(a: &Mask, b: &Mask) -> f64 {
    let dt = squared_edt(b);
    a.bits
        .iter()
        .zip(&dt)
        .filter(|(&on, _)| on)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

fn boundary(m: &Mask) -> Mask {
    let mut out = Mask::empty(m.h, m.w);
    for r in 0..m.h {
        for c in 0..m.w {
            if !m.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == m.h
                || c + 1 == m.w
                || !m.get(r - 1, c)
                || !m.get(r + 1, c)
                || !m.get(r, c - 1)
                || !m.get(r, c + 1);
            out.set(r, c, edge);
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance to the nearest set pixel
/// (Felzenszwalb–Huttenlocher, separable lower envelopes of parabolas).
pub(crate) fn squared_edt(m: &Mask) -> Vec<f64> {
    let (h, w) = (m.h, m.w);
    let mut grid: Vec<f64> = m.bits.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        envelope(&f[..h], &mut d[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        envelope(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

fn envelope(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let meet = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
        let mut s = meet(v[k]);
        // z[0] is −∞, so this stops at k = 0
        while s <= z[k] {
            k -= 1;
            s = meet(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

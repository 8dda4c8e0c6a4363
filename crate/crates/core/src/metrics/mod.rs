//! Overlap and distance metrics on binary masks, their aggregation across
//! runs and categories, and the Wilcoxon signed-rank test.

mod aggregate;
mod distance;
mod wilcoxon;

pub(crate) use aggregate::mean_sd;
pub use aggregate::{
    aggregate, ecdf, write_ecdf_csv, AggregateRow, Axis, MetricRecord, MetricReport, Tags, REPORT_VERSION,
};
pub use distance::{hausdorff, Hausdorff, HausdorffMode};
pub use wilcoxon::{wilcoxon_signed_rank, Wilcoxon, WilcoxonMethod};

use crate::substrate::Tensor4;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::shape("mask", format!("{} bits for {h}x{w}", bits.len())));
        }
        Ok(Mask { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    /// Reads a single-channel plane of sample `n`, treating non-zero as set.
    pub fn from_tensor(t: &Tensor4, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c() != 1 || n >= s.n() {
            return Err(Error::shape("mask", format!("sample {n} of {s}")));
        }
        let bits = t.sample(n).iter().map(|&v| v != 0.0).collect();
        Mask::new(s.h(), s.w(), bits)
    }

    pub fn to_tensor(&self) -> Tensor4 {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor4::from_vec([1, 1, self.h, self.w], data).expect("mask dimensions are non-zero")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.w + c] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn diagonal(&self) -> f64 {
        ((self.h * self.h + self.w * self.w) as f64).sqrt()
    }

    /// Foreground coordinates as `(row, col)`.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / self.w, i % self.w))
    }
}

/// `p ≥ t` pixelwise over one plane of `p`.
pub fn binarize(p: &Tensor4, n: usize, t: f64) -> Result<Mask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Invalid(format!("threshold must lie in (0, 1), got {t}")));
    }
    let thresholded = p.map(|v| if v >= t { 1.0 } else { 0.0 });
    Mask::from_tensor(&thresholded, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn gt_area(&self) -> usize {
        self.tp + self.fn_
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Counts> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::shape(
            "confusion",
            format!("prediction {}x{} vs ground truth {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP/(2TP+FP+FN)`; two empty masks agree perfectly and score 1.
pub fn dsc(c: &Counts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

fn require_gt(c: &Counts, what: &str) -> Result<()> {
    if c.gt_area() == 0 {
        return Err(Error::Invalid(format!("{what} is undefined for an empty ground truth")));
    }
    Ok(())
}

pub fn sen(c: &Counts) -> Result<f64> {
    require_gt(c, "sensitivity")?;
    Ok(c.tp as f64 / c.gt_area() as f64)
}

/// Relative area difference `|A_pred − A_gt| / A_gt`.
pub fn delta_a(c: &Counts) -> Result<f64> {
    require_gt(c, "relative area difference")?;
    let pred = (c.tp + c.fp) as f64;
    let gt = c.gt_area() as f64;
    Ok((pred - gt).abs() / gt)
}

/// All four metrics for one image.
pub fn evaluate(image_id: &str, pred: &Mask, gt: &Mask, tags: Tags) -> Result<MetricRecord> {
    let c = confusion(pred, gt)?;
    let h = hausdorff(pred, gt, HausdorffMode::AllPixels)?;
    Ok(MetricRecord {
        image_id: image_id.to_string(),
        dsc: dsc(&c),
        sen: sen(&c)?,
        delta_a: delta_a(&c)?,
        hau: h.value,
        hau_sentinel: h.sentinel,
        tags,
    })
}

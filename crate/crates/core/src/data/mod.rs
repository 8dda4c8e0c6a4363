//! Raw cases, the crop → resize → normalize chain, mass patch extraction,
//! a synthetic case generator, directory IO and fold splitting.

mod io;
mod synth;

pub use io::{load_directory, read_png, write_directory, write_png_gray16, write_png_mask};
pub use synth::{generate_synthetic, ShapeFamily, SynthParams};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{Mask, Tags};
use crate::network::DOWNSAMPLE;
use crate::substrate::{linear_taps, resize_plane, Tensor4};
use crate::{Error, Result};

pub const DEFAULT_SIZE: usize = 256;
pub const DEFAULT_TAU: f64 = 0.05;
pub const MIN_PATCH: usize = 8;

/// A single-channel real image in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::shape("image", format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Image { h, w, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    fn crop(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Image {
        let (h, w) = (rows.len(), cols.len());
        let data = rows
            .flat_map(|r| {
                self.data[r * self.w + cols.start..r * self.w + cols.end]
                    .iter()
                    .copied()
            })
            .collect();
        Image { h, w, data }
    }
}

fn crop_mask(m: &Mask, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mask {
    let (h, w) = (rows.len(), cols.len());
    let bits = rows
        .flat_map(|r| cols.clone().map(move |c| (r, c)))
        .map(|(r, c)| m.get(r, c))
        .collect();
    Mask::new(h, w, bits).expect("crop stays inside the mask")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawCase {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub tags: Tags,
}

impl RawCase {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask, tags: Tags) -> Result<Self> {
        let id = id.into();
        if (image.h, image.w) != (mask.height(), mask.width()) {
            return Err(Error::shape(
                "raw_case",
                format!(
                    "{id}: image {}x{} vs mask {}x{}",
                    image.h,
                    image.w,
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        Ok(RawCase { id, image, mask, tags })
    }

    fn cropped(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> RawCase {
        RawCase {
            id: self.id.clone(),
            image: self.image.crop(rows.clone(), cols.clone()),
            mask: crop_mask(&self.mask, rows, cols),
            tags: self.tags.clone(),
        }
    }
}

/// Half-open crop rectangle in the coordinates of the image it was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cropped {
    pub case: RawCase,
    pub crop: CropBox,
    /// The intensity crop would have cut mask pixels and was widened.
    pub clipped_to_mask: bool,
}

/// Tight bounding box of the mask, or `None` when it is empty.
pub fn mask_bbox(m: &Mask) -> Option<CropBox> {
    let mut b: Option<CropBox> = None;
    for (r, c) in m.points() {
        let e = b.get_or_insert(CropBox {
            top: r,
            bottom: r + 1,
            left: c,
            right: c + 1,
        });
        e.top = e.top.min(r);
        e.bottom = e.bottom.max(r + 1);
        e.left = e.left.min(c);
        e.right = e.right.max(c + 1);
    }
    b
}

/// Strips border rows and columns whose maximum is below `tau` times the
/// global maximum, never cutting into the mask.
pub fn crop_background(case: &RawCase, tau: f64) -> Result<Cropped> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Invalid(format!(
            "background threshold must lie in [0, 1), got {tau}"
        )));
    }
    let img = &case.image;
    let global = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(global > 0.0) {
        return Err(Error::Invalid(format!(
            "{}: image has no non-negligible intensity",
            case.id
        )));
    }
    let cut = tau * global;
    let row_max: Vec<f64> = (0..img.h)
        .map(|r| {
            img.data[r * img.w..(r + 1) * img.w]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let col_max: Vec<f64> = (0..img.w)
        .map(|c| (0..img.h).map(|r| img.get(r, c)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let keep = |v: &f64| *v >= cut;
    // the row and column holding the global maximum always survive
    let mut crop = CropBox {
        top: row_max.iter().position(keep).expect("global max row"),
        bottom: row_max.iter().rposition(keep).expect("global max row") + 1,
        left: col_max.iter().position(keep).expect("global max column"),
        right: col_max.iter().rposition(keep).expect("global max column") + 1,
    };
    let mut clipped = false;
    if let Some(m) = mask_bbox(&case.mask) {
        let widened = CropBox {
            top: crop.top.min(m.top),
            bottom: crop.bottom.max(m.bottom),
            left: crop.left.min(m.left),
            right: crop.right.max(m.right),
        };
        if widened != crop {
            warn!("{}: background crop would remove mask pixels; keeping them", case.id);
            clipped = true;
            crop = widened;
        }
    }
    Ok(Cropped {
        case: case.cropped(crop.top..crop.bottom, crop.left..crop.right),
        crop,
        clipped_to_mask: clipped,
    })
}

/// Network-ready image and mask at a fixed square size.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `(1, 3, S, S)`, three identical channels in [0, 1].
    pub image: Tensor4,
    /// `(1, 1, S, S)`, binary.
    pub mask: Tensor4,
    pub tags: Tags,
    /// Size of the case before resizing.
    pub source_size: (usize, usize),
    /// Crop applied to the original image, if known.
    pub crop: Option<CropBox>,
    /// The image was constant and normalizes to zeros.
    pub constant_image: bool,
    /// A non-empty mask became empty under resizing.
    pub mask_vanished: bool,
}

fn nearest_index(o: usize, src: usize, dst: usize) -> usize {
    (((o as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
}

/// Bilinear image resize, nearest-neighbour mask resize, per-image min-max
/// normalization and channel tripling.
pub fn standardize(case: &RawCase, size: usize) -> Result<SegmentationSample> {
    if size == 0 || !size.is_multiple_of(DOWNSAMPLE) {
        return Err(Error::Config(format!(
            "sample size must be a positive multiple of {DOWNSAMPLE}, got {size}"
        )));
    }
    let img = &case.image;
    let mut plane = vec![0.0; size * size];
    resize_plane(
        &img.data,
        img.h,
        img.w,
        &linear_taps(img.h, size),
        &linear_taps(img.w, size),
        &mut plane,
    );
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let constant_image = !(hi > lo);
    if constant_image {
        warn!("{}: constant image normalizes to zeros", case.id);
        plane.iter_mut().for_each(|v| *v = 0.0);
    } else {
        plane.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    let image = Tensor4::from_vec([1, 3, size, size], data)?;

    let m = &case.mask;
    let cols: Vec<usize> = (0..size).map(|o| nearest_index(o, m.width(), size)).collect();
    let mut mask = Vec::with_capacity(size * size);
    for o in 0..size {
        let r = nearest_index(o, m.height(), size);
        mask.extend(cols.iter().map(|&c| if m.get(r, c) { 1.0 } else { 0.0 }));
    }
    let mask_vanished = !m.is_empty() && !mask.contains(&1.0);
    if mask_vanished {
        warn!("{}: mask vanished under resize to {size}", case.id);
    }
    Ok(SegmentationSample {
        id: case.id.clone(),
        image,
        mask: Tensor4::from_vec([1, 1, size, size], mask)?,
        tags: case.tags.clone(),
        source_size: (img.h, img.w),
        crop: None,
        constant_image,
        mask_vanished,
    })
}

/// Crop with `tau`, then standardize to `size`.
pub fn preprocess(case: &RawCase, tau: f64, size: usize) -> Result<SegmentationSample> {
    let cropped = crop_background(case, tau)?;
    let mut sample = standardize(&cropped.case, size)?;
    sample.source_size = (case.image.h, case.image.w);
    sample.crop = Some(cropped.crop);
    Ok(sample)
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// One side of the enlarged box, clamped to `[0, limit)`.
fn enlarge(start: usize, len: usize, limit: usize, min_side: usize) -> (usize, usize) {
    let side = (round_half_up(len as f64 * 1.2f64.sqrt()) as usize).max(min_side);
    let centre = start as f64 + len as f64 / 2.0;
    let lo = round_half_up(centre - side as f64 / 2.0);
    let hi = lo + side as i64;
    (lo.max(0) as usize, (hi.min(limit as i64)) as usize)
}

/// The mask's bounding box grown by √1.2 per side (20% in area) about its
/// centre, at least `min_side` pixels, clamped to the image.
pub fn patch_box(mask: &Mask, min_side: usize) -> Result<CropBox> {
    let b = mask_bbox(mask).ok_or_else(|| Error::Invalid("mass patch needs a non-empty mask".into()))?;
    let (top, bottom) = enlarge(b.top, b.height(), mask.height(), min_side);
    let (left, right) = enlarge(b.left, b.width(), mask.width(), min_side);
    Ok(CropBox {
        top,
        bottom,
        left,
        right,
    })
}

pub fn extract_mass_patch(case: &RawCase) -> Result<(RawCase, CropBox)> {
    let b = patch_box(&case.mask, MIN_PATCH).map_err(|e| match e {
        Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", case.id)),
        other => other,
    })?;
    Ok((case.cropped(b.top..b.bottom, b.left..b.right), b))
}

/// Deterministic `k`-way split of `ids`; fold sizes differ by at most one.
pub fn split_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Invalid(format!("{} ids cannot fill {k} folds", ids.len())));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::Invalid("duplicate ids".into()));
    }
    // Fisher–Yates on u64 draws so the permutation is platform independent
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        order.swap(i, j);
    }
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut it = order.into_iter();
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(it.by_ref().take(size).collect());
    }
    Ok(folds)
}

#[cfg(test)]
mod tests;

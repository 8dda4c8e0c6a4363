use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, RawCase};
use crate::metrics::{Mask, Tags};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Lobulated,
    /// Radially perturbed outline.
    Irregular,
    /// Cycles through the three families case by case.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Square canvas side in pixels.
    pub size: usize,
    /// Mass area over canvas area, inclusive range.
    pub area_ratio: (f64, f64),
    pub shape: ShapeFamily,
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    /// Intensity added inside the mass.
    pub contrast: f64,
    /// Columns of black border on the left, as in a film scan.
    pub border: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 64,
            area_ratio: (0.01, 0.04),
            shape: ShapeFamily::Mixed,
            texture: 0.1,
            contrast: 0.35,
            border: 0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_ratio;
        if !(lo > 0.0 && lo <= hi && hi <= 0.25) {
            return Err(Error::Config(format!(
                "area ratio range ({lo}, {hi}) must lie within (0, 0.25]"
            )));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("canvas size {} is below 8", self.size)));
        }
        if self.border >= self.size / 2 {
            return Err(Error::Config(format!(
                "border {} leaves no room on a {} canvas",
                self.border, self.size
            )));
        }
        if !(self.texture >= 0.0 && self.contrast >= 0.0 && self.texture + self.contrast <= 0.6) {
            return Err(Error::Config(format!(
                "texture {} and contrast {} must be non-negative with sum at most 0.6",
                self.texture, self.contrast
            )));
        }
        let pixels = (self.size * self.size) as f64;
        if (hi * pixels).floor() < (lo * pixels).ceil() {
            return Err(Error::Invalid(format!(
                "no whole pixel count fits area ratio ({lo}, {hi}) on a {0}x{0} canvas",
                self.size
            )));
        }
        Ok(())
    }
}

/// Unit-scale outline `ρ(θ)` of a mass.
struct Outline {
    aspect: f64,
    rotation: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Outline {
    fn random(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Self {
        let aspect = rng.random_range(0.6..1.0);
        let rotation = rng.random_range(0.0..PI);
        let harmonics = match family {
            ShapeFamily::Ellipse | ShapeFamily::Mixed => vec![],
            ShapeFamily::Lobulated => {
                let k = rng.random_range(3..=5) as f64;
                vec![(k, rng.random_range(0.12..0.22), rng.random_range(0.0..TAU))]
            }
            ShapeFamily::Irregular => (2..=7)
                .map(|k| (k as f64, rng.random_range(0.02..0.09), rng.random_range(0.0..TAU)))
                .collect(),
        };
        Outline {
            aspect,
            rotation,
            harmonics,
        }
    }

    fn radius(&self, theta: f64) -> f64 {
        let t = theta - self.rotation;
        let (c, s) = (t.cos(), t.sin() / self.aspect);
        let base = 1.0 / (c * c + s * s).sqrt();
        let wobble: f64 = self.harmonics.iter().map(|&(k, a, p)| a * (k * theta + p).sin()).sum();
        base * (1.0 + wobble)
    }

    /// Pixels whose centre lies inside the outline scaled by `scale` about
    /// `(cy, cx)`.
    fn render(&self, size: usize, cy: f64, cx: f64, scale: f64) -> Mask {
        let mut m = Mask::empty(size, size);
        for r in 0..size {
            for c in 0..size {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                let d = (dy * dy + dx * dx).sqrt();
                if d <= scale * self.radius(dy.atan2(dx)) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }
}

fn family_name(f: ShapeFamily) -> &'static str {
    match f {
        ShapeFamily::Ellipse => "oval",
        ShapeFamily::Lobulated => "lobulated",
        _ => "irregular",
    }
}

/// Rendered mask whose area is closest to `target` pixels among those
/// inside `[min, max]` (or closest to that range if none are), by bisection
/// on the outline scale.
fn fit_scale(outline: &Outline, size: usize, target: f64, min: f64, max: f64) -> Mask {
    let c = size as f64 / 2.0;
    let (mut lo, mut hi) = (0.0, size as f64);
    let score = |area: f64| ((min - area).max(area - max).max(0.0), (area - target).abs());
    let mut best: Option<((f64, f64), Mask)> = None;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let m = outline.render(size, c, c, mid);
        let area = m.area() as f64;
        let s = score(area);
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, m));
        }
        if area < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.expect("at least one bisection step").1
}

fn shift_mask(m: &Mask, dy: i64, dx: i64) -> Mask {
    let mut out = Mask::empty(m.height(), m.width());
    for (r, c) in m.points() {
        out.set((r as i64 + dy) as usize, (c as i64 + dx) as usize, true);
    }
    out
}

/// Low-frequency sinusoidal texture in roughly [-1, 1].
fn texture(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let freq = rng.random_range(1.0..4.0) * TAU / size as f64;
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.random_range(0.0..TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            waves
                .iter()
                .map(|&(fy, fx, p, a)| a * (fy * r + fx * c + p).sin())
                .sum::<f64>()
                / norm
        })
        .collect()
}

fn one_case(params: &SynthParams, index: usize) -> Result<RawCase> {
    // every case has its own stream so cases do not depend on each other
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64 + 1);
    let size = params.size;
    let family = match params.shape {
        ShapeFamily::Mixed => [ShapeFamily::Ellipse, ShapeFamily::Lobulated, ShapeFamily::Irregular][index % 3],
        f => f,
    };
    let outline = Outline::random(family, &mut rng);
    let pixels = (size * size) as f64;
    let (lo, hi) = params.area_ratio;
    let target = rng.random_range(lo..=hi) * pixels;
    let centred = fit_scale(&outline, size, target, lo * pixels, hi * pixels);
    let area = centred.area() as f64;
    if area < lo * pixels || area > hi * pixels {
        return Err(Error::Invalid(format!(
            "case {index}: rendered area ratio {:.5} misses ({lo}, {hi}) on a {size}x{size} canvas",
            area / pixels
        )));
    }
    // translate by whole pixels so the support is unchanged
    let bbox = super::mask_bbox(&centred).expect("fitted mask is non-empty");
    let room = |start: usize, end: usize, floor: usize| -> Result<(i64, i64)> {
        let min = floor as i64 - start as i64;
        let max = size as i64 - end as i64;
        if min > max {
            return Err(Error::Invalid(format!("case {index}: mass does not fit on the canvas")));
        }
        Ok((min, max))
    };
    let (ry, rx) = (
        room(bbox.top, bbox.bottom, 0)?,
        room(bbox.left, bbox.right, params.border)?,
    );
    let dy = rng.random_range(ry.0..=ry.1);
    let dx = rng.random_range(rx.0..=rx.1);
    let mask = shift_mask(&centred, dy, dx);

    let tex = texture(size, &mut rng);
    let base = rng.random_range(0.3..0.4);
    let mut data = Vec::with_capacity(size * size);
    for (i, t) in tex.iter().enumerate() {
        let (r, c) = (i / size, i % size);
        let v = if c < params.border {
            0.0
        } else {
            let noise = rng.random_range(-0.02..0.02);
            base + params.texture * t + noise + if mask.get(r, c) { params.contrast } else { 0.0 }
        };
        data.push(v.clamp(0.0, 1.0));
    }

    let margins: &[&str] = match family {
        ShapeFamily::Ellipse => &["circumscribed", "obscured"],
        ShapeFamily::Lobulated => &["microlobulated", "obscured"],
        _ => &["ill_defined", "spiculated"],
    };
    let tags = Tags {
        subtlety: Some(rng.random_range(1..=5).to_string()),
        birads: Some(rng.random_range(2..=5).to_string()),
        shape: Some(family_name(family).to_string()),
        margin: Some(margins[rng.random_range(0..margins.len())].to_string()),
        pathology: Some(if rng.random_bool(0.5) { "malignant" } else { "benign" }.to_string()),
    };
    RawCase::new(format!("synth_{index:04}"), Image::new(size, size, data)?, mask, tags)
}

/// `n` textured cases, each with one mass whose mask is its exact support.
pub fn generate_synthetic(params: &SynthParams, n: usize) -> Result<Vec<RawCase>> {
    params.validate()?;
    (0..n).map(|i| one_case(params, i)).collect()
}

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use aunet::metrics::Mask;
use aunet::Error;

const WHITE: [u8; 3] = [255, 255, 255];
const GREEN: [u8; 3] = [0, 255, 0];
const BLACK: [u8; 3] = [0, 0, 0];

#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub w: usize,
    pub h: usize,
    pub px: Vec<[u8; 3]>,
}

impl Rgb {
    /// Intensities in [0, 1] as gray.
    pub fn from_gray(h: usize, w: usize, v: &[f64]) -> Self {
        let px = v
            .iter()
            .map(|&x| {
                let b = (x.clamp(0.0, 1.0) * 255.0).round() as u8;
                [b; 3]
            })
            .collect();
        Rgb { w, h, px }
    }

    fn put(&mut self, r: usize, c: usize, colour: [u8; 3]) {
        if r < self.h && c < self.w {
            self.px[r * self.w + c] = colour;
        }
    }
}

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn contour(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height(), m.width());
    let mut out = Vec::new();
    for (r, c) in m.points() {
        let edge = r == 0
            || c == 0
            || r + 1 == h
            || c + 1 == w
            || !m.get(r - 1, c)
            || !m.get(r + 1, c)
            || !m.get(r, c - 1)
            || !m.get(r, c + 1);
        if edge {
            out.push((r, c));
        }
    }
    out
}

// 3×5 glyphs, one row per entry, high bit on the left
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '=' => [0, 7, 0, 7, 0],
        'D' => [6, 5, 5, 5, 6],
        'S' => [7, 4, 7, 1, 7],
        'C' => [7, 4, 4, 4, 7],
        '-' => [0, 0, 7, 0, 0],
        _ => [0; 5],
    }
}

/// Draws `text` in white on a black box anchored at the bottom-right.
pub fn stamp(img: &mut Rgb, text: &str) {
    let scale = (img.w.min(img.h) / 128).max(1);
    let n = text.chars().count();
    let (tw, th) = ((4 * n + 1) * scale, 7 * scale);
    let left = img.w.saturating_sub(tw);
    let top = img.h.saturating_sub(th);
    for r in top..img.h {
        for c in left..img.w {
            img.put(r, c, BLACK);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (gy, row) in g.iter().enumerate() {
            for gx in 0..3 {
                if row & (4 >> gx) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let r = top + (gy + 1) * scale + dy;
                        let c = left + (4 * i + 1 + gx) * scale + dx;
                        img.put(r, c, WHITE);
                    }
                }
            }
        }
    }
}

/// Ground-truth contour in white, prediction contour in green on top,
/// and the DSC in the bottom-right corner when ground truth is known.
pub fn overlay(gray: &Rgb, pred: &Mask, gt: Option<&Mask>, dsc: Option<f64>) -> Rgb {
    let mut img = gray.clone();
    if let Some(gt) = gt {
        for (r, c) in contour(gt) {
            img.put(r, c, WHITE);
        }
    }
    for (r, c) in contour(pred) {
        img.put(r, c, GREEN);
    }
    if let Some(d) = dsc {
        stamp(&mut img, &format!("DSC={d:.3}"));
    }
    img
}

pub enum Pixels<'a> {
    Gray(&'a [u8]),
    Rgb(&'a Rgb),
}

/// 8-bit PNG carrying `tEXt` chunks with the toolkit and configuration.
pub fn write_png(path: &Path, w: usize, h: usize, pixels: Pixels<'_>, echo: &serde_json::Value) -> aunet::Result<()> {
    let fmt = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let file = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_depth(png::BitDepth::Eight);
    let flat: Vec<u8>;
    let bytes = match pixels {
        Pixels::Gray(b) => {
            enc.set_color(png::ColorType::Grayscale);
            b
        }
        Pixels::Rgb(img) => {
            enc.set_color(png::ColorType::Rgb);
            flat = img.px.iter().flatten().copied().collect();
            &flat
        }
    };
    enc.add_text_chunk("toolkit".into(), format!("aunet {}", aunet::VERSION))
        .map_err(fmt)?;
    enc.add_itxt_chunk("config".into(), echo.to_string()).map_err(fmt)?;
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(bytes).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Image, RawCase};
use crate::metrics::{Mask, Tags};
use crate::{Error, Result};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Reads a PNG as intensities in [0, 1]. Colour images are reduced to the
/// mean of their colour channels; alpha is ignored.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (colour, alpha) = match info.color_type {
        png::ColorType::Grayscale => (1, 0),
        png::ColorType::GrayscaleAlpha => (1, 1),
        png::ColorType::Rgb => (3, 0),
        png::ColorType::Rgba => (3, 1),
        other => return Err(png_err(path, format!("unsupported colour type {other:?}"))),
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.line_size * h].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..info.line_size * h]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect(),
        other => return Err(png_err(path, format!("unsupported bit depth {other:?}"))),
    };
    let stride = colour + alpha;
    let data = samples
        .chunks_exact(stride)
        .map(|px| px[..colour].iter().sum::<f64>() / colour as f64)
        .collect();
    Image::new(h, w, data)
}

fn write_png(path: &Path, w: usize, h: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// 16-bit grayscale; values are clamped to [0, 1].
pub fn write_png_gray16(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_png(path, img.w, img.h, png::BitDepth::Sixteen, &bytes)
}

/// 8-bit, 255 for foreground.
pub fn write_png_mask(path: &Path, m: &Mask) -> Result<()> {
    let bytes: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, m.width(), m.height(), png::BitDepth::Eight, &bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    id: String,
    subtlety: Option<String>,
    birads: Option<String>,
    shape: Option<String>,
    margin: Option<String>,
    pathology: Option<String>,
}

/// Writes `images/<id>.png` (16-bit), `masks/<id>.png` and `meta.csv`.
pub fn write_directory(root: &Path, cases: &[RawCase]) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let meta = root.join("meta.csv");
    let mut w = csv::Writer::from_path(&meta).map_err(|e| png_err(&meta, e))?;
    for case in cases {
        write_png_gray16(&root.join("images").join(format!("{}.png", case.id)), &case.image)?;
        write_png_mask(&root.join("masks").join(format!("{}.png", case.id)), &case.mask)?;
        let t = case.tags.clone();
        w.serialize(MetaRow {
            id: case.id.clone(),
            subtlety: t.subtlety,
            birads: t.birads,
            shape: t.shape,
            margin: t.margin,
            pathology: t.pathology,
        })?;
    }
    w.flush().map_err(|e| Error::io(&meta, e))
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, Tags>> {
    let mut out = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| png_err(path, e))?;
    for row in reader.deserialize() {
        let row: MetaRow = row.map_err(|e| png_err(path, e))?;
        let blank = |s: Option<String>| s.filter(|v| !v.is_empty());
        out.insert(
            row.id,
            Tags {
                subtlety: blank(row.subtlety),
                birads: blank(row.birads),
                shape: blank(row.shape),
                margin: blank(row.margin),
                pathology: blank(row.pathology),
            },
        );
    }
    Ok(out)
}

/// Loads every `images/<id>.png` with its `masks/<id>.png`, sorted by id.
pub fn load_directory(root: &Path) -> Result<Vec<RawCase>> {
    let images = root.join("images");
    let entries = std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Invalid(format!("no PNG images under {}", images.display())));
    }
    let meta_path = root.join("meta.csv");
    let meta = if meta_path.exists() {
        read_meta(&meta_path)?
    } else {
        BTreeMap::new()
    };
    ids.iter()
        .map(|id| {
            let image = read_png(&images.join(format!("{id}.png")))?;
            let mask_path = root.join("masks").join(format!("{id}.png"));
            if !mask_path.exists() {
                return Err(Error::io(
                    &mask_path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, format!("mask for image {id} is missing")),
                ));
            }
            let m = read_png(&mask_path)?;
            let mask = Mask::new(m.h, m.w, m.data.iter().map(|&v| v > 0.0).collect())?;
            RawCase::new(id.clone(), image, mask, meta.get(id).cloned().unwrap_or_default())
        })
        .collect()
}

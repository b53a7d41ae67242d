use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::preprocess::{normalize, Image, Mask};

/// Dataset metadata written next to `images/` and `masks/`.
pub const META_FILE: &str = "dataset.json";

fn decode_err(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn encode_err(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Decode to 8-bit samples; returns `(height, width, channels, bytes)`.
fn read_png8(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = BufReader::new(File::open(path)?);
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    let (h, w) = (info.height as usize, info.width as usize);
    // Drop any row padding the decoder left in place.
    if info.line_size != w * channels {
        let packed = buf
            .chunks(info.line_size)
            .flat_map(|row| row[..w * channels].iter().copied())
            .collect();
        return Ok((h, w, channels, packed));
    }
    Ok((h, w, channels, buf))
}

/// Read an 8-bit PNG as an RGB image in `[0, 1]`. Gray inputs are expanded
/// and alpha is dropped.
pub fn read_image_png(path: &Path) -> Result<Image> {
    let (h, w, ch, raw) = read_png8(path)?;
    let rgb: Vec<u16> = raw
        .chunks(ch)
        .flat_map(|p| match ch {
            1 | 2 => [p[0], p[0], p[0]],
            _ => [p[0], p[1], p[2]],
        })
        .map(u16::from)
        .collect();
    normalize(h, w, &rgb)
}

/// Read a mask PNG; first-channel values above 127 are wound pixels.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let (h, w, ch, raw) = read_png8(path)?;
    let data = raw.chunks(ch).map(|p| u8::from(p[0] > 127)).collect();
    Mask::new(h, w, data)
}

fn write_png8(path: &Path, h: usize, w: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| encode_err(path, e))?;
    writer.write_image_data(data).map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))
}

/// 8-bit RGB PNG, each value rounded to the nearest of 256 levels.
pub fn write_image_png(path: &Path, img: &Image) -> Result<()> {
    let data: Vec<u8> = img.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_png8(path, img.height(), img.width(), png::ColorType::Rgb, &data)
}

/// 8-bit grayscale PNG with wound pixels at 255.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data().iter().map(|&m| m * 255).collect();
    write_png8(path, mask.height(), mask.width(), png::ColorType::Grayscale, &data)
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Load `<dir>/images/<id>.png` with `<dir>/masks/<id>.png`, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    let image_ids = png_stems(&images)?;
    let mask_ids = png_stems(&masks)?;
    if let Some(id) = image_ids.difference(&mask_ids).next() {
        return Err(Error::data(format!("image {id} has no mask")));
    }
    if let Some(id) = mask_ids.difference(&image_ids).next() {
        return Err(Error::data(format!("mask {id} has no image")));
    }
    let mut samples = Vec::with_capacity(image_ids.len());
    for id in &image_ids {
        let img = read_image_png(&images.join(format!("{id}.png")))?;
        let mask = read_mask_png(&masks.join(format!("{id}.png")))?;
        samples.push(Sample::new(id.clone(), img, mask)?);
    }
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?
    } else {
        DatasetMeta {
            source: dir.display().to_string(),
            ..DatasetMeta::default()
        }
    };
    Dataset::new(samples, meta)
}

/// Write the dataset layout read by [`load_dataset`], plus its metadata.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    for s in ds.samples() {
        if s.id.contains(['/', '\\']) || s.id.is_empty() {
            return Err(Error::data(format!("sample id {:?} is not a valid file stem", s.id)));
        }
        write_image_png(&images.join(format!("{}.png", s.id)), &s.image)?;
        write_mask_png(&masks.join(format!("{}.png", s.id)), &s.mask)?;
    }
    let meta = serde_json::to_vec_pretty(&ds.meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

/// Blend `color` into wound pixels: `(1 − alpha)·in + alpha·color`.
pub fn render_overlay(img: &Image, mask: &Mask, color: [f64; 3], alpha: f64) -> Result<Image> {
    if (img.height(), img.width()) != (mask.height(), mask.width()) {
        return Err(Error::data(format!(
            "overlay image is {}x{} but mask is {}x{}",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) || color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::param("overlay alpha and color must lie in [0, 1]"));
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(y, x) {
                let p = img.pixel(y, x);
                out.set_pixel(y, x, std::array::from_fn(|k| (1.0 - alpha) * p[k] + alpha * color[k]));
            }
        }
    }
    Ok(out)
}

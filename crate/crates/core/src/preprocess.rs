//! Image conditioning: resizing with half-pixel centers and optional
//! anti-aliasing, plus 8-bit to unit-range normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::param(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Build from a per-pixel closure returning `[r, g, b]`; values are clamped
    /// to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Channel-planar (C×H×W) copy of the pixels.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, p) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = p[c];
            }
        }
        out
    }
}

/// Binary ground-truth map, `1` marks a wound pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::param(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::data(format!("mask value {v} is not binary")));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    /// Number of wound pixels.
    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// `v / 255`.
    #[default]
    UnitRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub antialias: bool,
    pub normalize_mode: NormalizeMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: 224,
            antialias: true,
            normalize_mode: NormalizeMode::UnitRange,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::param("target_size must be positive"));
        }
        Ok(())
    }

    /// Resize an image/mask pair to the configured square size.
    pub fn apply(&self, img: &Image, mask: &Mask) -> Result<(Image, Mask)> {
        self.validate()?;
        let s = self.target_size;
        Ok((
            resize_bilinear(img, s, s, self.antialias)?,
            resize_mask_nearest(mask, s, s)?,
        ))
    }
}

/// Sparse 1-D resampling weights: for each output index, `(first, weights)`.
struct AxisWeights {
    taps: Vec<(usize, Vec<f64>)>,
}

impl AxisWeights {
    fn new(in_len: usize, out_len: usize, antialias: bool) -> Self {
        let scale = in_len as f64 / out_len as f64;
        // Downscaling with anti-aliasing widens the triangle to cover every
        // source pixel that falls under the destination footprint.
        let support = if antialias && scale > 1.0 { scale } else { 1.0 };
        let taps = (0..out_len)
            .map(|d| {
                let center = (d as f64 + 0.5) * scale - 0.5;
                let lo = ((center - support).floor() as isize).max(0) as usize;
                let hi = ((center + support).ceil() as isize).min(in_len as isize - 1) as usize;
                let mut w: Vec<f64> = (lo..=hi)
                    .map(|j| (1.0 - (j as f64 - center).abs() / support).max(0.0))
                    .collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= total);
                (lo, w)
            })
            .collect();
        AxisWeights { taps }
    }
}

/// Resize with a bilinear (triangle) kernel on half-pixel-centered
/// coordinates: destination `d` samples source `(d + 0.5)·scale − 0.5`.
///
/// With `antialias` and a shrinking axis the kernel footprint is widened by the
/// scale factor, turning interpolation into area-weighted averaging. Edge taps
/// are renormalized over in-bounds pixels, so the output is a convex
/// combination of inputs and never leaves the input's value range.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize, antialias: bool) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::data("cannot resize an empty image"));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let wx = AxisWeights::new(img.width, out_w, antialias);
    let wy = AxisWeights::new(img.height, out_h, antialias);

    let mut horiz = vec![0.0; img.height * out_w * 3];
    for y in 0..img.height {
        for (ox, (lo, w)) in wx.taps.iter().enumerate() {
            let mut acc = [0.0; 3];
            for (k, &wk) in w.iter().enumerate() {
                let p = img.pixel(y, lo + k);
                for c in 0..3 {
                    acc[c] += wk * p[c];
                }
            }
            horiz[(y * out_w + ox) * 3..(y * out_w + ox) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0; out_h * out_w * 3];
    for (oy, (lo, w)) in wy.taps.iter().enumerate() {
        for ox in 0..out_w {
            let mut acc = [0.0; 3];
            for (k, &wk) in w.iter().enumerate() {
                let i = ((lo + k) * out_w + ox) * 3;
                for c in 0..3 {
                    acc[c] += wk * horiz[i + c];
                }
            }
            let o = (oy * out_w + ox) * 3;
            for c in 0..3 {
                out[o + c] = acc[c].clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        data: out,
    })
}

/// Source index picked by nearest-neighbor sampling under the half-pixel map.
pub(crate) fn nearest_index(d: usize, in_len: usize, out_len: usize) -> usize {
    let scale = in_len as f64 / out_len as f64;
    (((d as f64 + 0.5) * scale).floor() as usize).min(in_len - 1)
}

/// Nearest-neighbor resize with the same half-pixel mapping as
/// [`resize_bilinear`]; the output stays binary.
pub fn resize_mask_nearest(mask: &Mask, out_h: usize, out_w: usize) -> Result<Mask> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    if mask.height == 0 || mask.width == 0 {
        return Err(Error::data("cannot resize an empty mask"));
    }
    let cols: Vec<usize> = (0..out_w)
        .map(|x| nearest_index(x, mask.width, out_w))
        .collect();
    Ok(Mask::from_fn(out_h, out_w, |y, x| {
        mask.get(nearest_index(y, mask.height, out_h), cols[x])
    }))
}

/// Map 8-bit samples (interleaved RGB) to `[0, 1]` by `v / 255`.
///
/// Samples are accepted as `u16` so that 16-bit decodes can be rejected
/// rather than silently truncated.
pub fn normalize(height: usize, width: usize, samples: &[u16]) -> Result<Image> {
    if let Some(v) = samples.iter().find(|&&v| v > 255) {
        return Err(Error::data(format!("sample value {v} exceeds 255")));
    }
    Image::new(
        height,
        width,
        samples.iter().map(|&v| v as f64 / 255.0).collect(),
    )
}

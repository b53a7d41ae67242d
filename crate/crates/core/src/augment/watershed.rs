use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::preprocess::{Image, Mask};

use super::AugmentConfig;

/// Boundary pixels are scaled by this factor in [`watershed_enhance`].
pub const BOUNDARY_DARKEN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WatershedResult {
    pub height: usize,
    pub width: usize,
    /// Region label per pixel, `0` on boundary pixels.
    pub labels: Vec<u32>,
    pub boundary: Vec<bool>,
}

impl WatershedResult {
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn is_boundary(&self, y: usize, x: usize) -> bool {
        self.boundary[y * self.width + x]
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary.iter().filter(|&&b| b).count()
    }
}

/// Central-difference gradient magnitude, one-sided at the frame edge.
pub fn gradient_magnitude(gray: &[f64], height: usize, width: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| gray[y * width + x];
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (ya, yb) = (y.saturating_sub(1), (y + 1).min(height - 1));
        for x in 0..width {
            let (xa, xb) = (x.saturating_sub(1), (x + 1).min(width - 1));
            let gx = if xb > xa {
                (at(y, xb) - at(y, xa)) / (xb - xa) as f64
            } else {
                0.0
            };
            let gy = if yb > ya {
                (at(yb, x) - at(ya, x)) / (yb - ya) as f64
            } else {
                0.0
            };
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Flooding priority: non-ridge before ridge, then lower gradient, then fewer
/// steps from a marker, then row-major index.
#[derive(Clone, Copy, Debug)]
pub struct FloodKey {
    pub ridge: bool,
    pub level: f64,
    pub hops: u32,
    pub index: usize,
}

impl Ord for FloodKey {
    fn cmp(&self, o: &Self) -> Ordering {
        self.ridge
            .cmp(&o.ridge)
            .then(self.level.total_cmp(&o.level))
            .then(self.hops.cmp(&o.hops))
            .then(self.index.cmp(&o.index))
    }
}

impl PartialOrd for FloodKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl PartialEq for FloodKey {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for FloodKey {}

pub(crate) fn neighbors4(i: usize, height: usize, width: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / width, i % width);
    [
        (y > 0).then(|| i - width),
        (x > 0).then(|| i - 1),
        (x + 1 < width).then(|| i + 1),
        (y + 1 < height).then(|| i + width),
    ]
    .into_iter()
    .flatten()
}

/// Marker-based watershed on the gradient magnitude of `gray`.
///
/// Markers (non-zero labels) seed a priority flood ordered by [`FloodKey`].
/// Gradients above `threshold · max` are ridges and only flood once no
/// lower pixel is queued. A pixel that touches two different labels when it
/// is popped becomes boundary and stops that front; pixels never reached are
/// boundary as well.
pub fn watershed_segment(
    gray: &[f64],
    markers: &[u32],
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<WatershedResult> {
    let n = height * width;
    if gray.len() != n || markers.len() != n {
        return Err(Error::shape("watershed_segment", &[gray.len(), markers.len()], &[n]));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let mut distinct: Vec<u32> = markers.iter().copied().filter(|&m| m != 0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::param(format!(
            "watershed needs at least 2 marker labels, got {}",
            distinct.len()
        )));
    }

    let grad = gradient_magnitude(gray, height, width);
    let cut = threshold * grad.iter().copied().fold(0.0, f64::max);
    let key = |i: usize, hops: u32| FloodKey {
        ridge: grad[i] > cut,
        level: grad[i],
        hops,
        index: i,
    };

    let mut labels = markers.to_vec();
    let mut boundary = vec![false; n];
    let mut queued: Vec<bool> = markers.iter().map(|&m| m != 0).collect();
    let mut heap = BinaryHeap::new();
    for i in (0..n).filter(|&i| markers[i] != 0) {
        for j in neighbors4(i, height, width) {
            if !queued[j] {
                queued[j] = true;
                heap.push(std::cmp::Reverse(key(j, 1)));
            }
        }
    }

    while let Some(std::cmp::Reverse(k)) = heap.pop() {
        let i = k.index;
        let mut found = 0u32;
        let mut conflict = false;
        for j in neighbors4(i, height, width) {
            let l = labels[j];
            if l != 0 {
                if found == 0 {
                    found = l;
                } else if l != found {
                    conflict = true;
                }
            }
        }
        if conflict || found == 0 {
            boundary[i] = true;
            continue;
        }
        labels[i] = found;
        for j in neighbors4(i, height, width) {
            if !queued[j] {
                queued[j] = true;
                heap.push(std::cmp::Reverse(key(j, k.hops + 1)));
            }
        }
    }
    for i in 0..n {
        if labels[i] == 0 {
            boundary[i] = true;
        }
    }
    Ok(WatershedResult {
        height,
        width,
        labels,
        boundary,
    })
}

fn morph3x3(mask: &Mask, erode: bool) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        let mut hit = erode;
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let v = mask.get(yy, xx);
                if erode {
                    hit &= v;
                } else {
                    hit |= v;
                }
            }
        }
        hit
    })
}

/// 3×3 erosion; out-of-frame neighbors are ignored.
pub fn erode3x3(mask: &Mask) -> Mask {
    morph3x3(mask, true)
}

/// 3×3 dilation; out-of-frame neighbors are ignored.
pub fn dilate3x3(mask: &Mask) -> Mask {
    morph3x3(mask, false)
}

/// Background marker label used by [`watershed_enhance`].
pub const BACKGROUND_LABEL: u32 = 1;
/// Wound marker label used by [`watershed_enhance`].
pub const WOUND_LABEL: u32 = 2;

/// Markers for a wound mask: the eroded mask is the wound seed and the
/// complement of the dilated mask is the background seed.
pub fn wound_markers(mask: &Mask) -> Vec<u32> {
    let fg = erode3x3(mask);
    let near = dilate3x3(mask);
    fg.data()
        .iter()
        .zip(near.data())
        .map(|(&f, &d)| {
            if f == 1 {
                WOUND_LABEL
            } else if d == 0 {
                BACKGROUND_LABEL
            } else {
                0
            }
        })
        .collect()
}

/// Darken the watershed boundary between wound and skin; the mask is
/// returned unchanged.
///
/// Fails with [`Error::Skip`] when the mask is empty or covers the frame, or
/// when either marker vanishes after erosion/dilation.
pub fn watershed_enhance(img: &Image, mask: &Mask, cfg: &AugmentConfig) -> Result<(Image, Mask)> {
    let (h, w) = (img.height(), img.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::data("image and mask dims differ"));
    }
    let count = mask.count();
    if count == 0 || count == mask.len() {
        return Err(Error::Skip("mask is empty or covers the frame".into()));
    }
    let markers = wound_markers(mask);
    let has = |l| markers.contains(&l);
    if !has(WOUND_LABEL) || !has(BACKGROUND_LABEL) {
        return Err(Error::Skip("wound or background marker is empty".into()));
    }
    let ws = watershed_segment(&img.luminance(), &markers, h, w, cfg.watershed_threshold)?;
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            if ws.is_boundary(y, x) {
                out.set_pixel(y, x, img.pixel(y, x).map(|v| v * BOUNDARY_DARKEN));
            }
        }
    }
    Ok((out, mask.clone()))
}

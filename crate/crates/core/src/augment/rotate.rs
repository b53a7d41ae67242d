use crate::error::{Error, Result};
use crate::preprocess::{Image, Mask};

/// `(sin, cos)` with exact values at multiples of 90°.
fn sin_cos_deg(angle: f64) -> (f64, f64) {
    if angle % 90.0 == 0.0 {
        match (angle / 90.0).rem_euclid(4.0) as u8 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        angle.to_radians().sin_cos()
    }
}

/// Bilinear sample with edge clamping.
fn sample_bilinear(img: &Image, xs: f64, ys: f64) -> [f64; 3] {
    let (h, w) = (img.height(), img.width());
    let xs = xs.clamp(0.0, (w - 1) as f64);
    let ys = ys.clamp(0.0, (h - 1) as f64);
    let x0 = xs.floor() as usize;
    let y0 = ys.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xs - x0 as f64;
    let fy = ys - y0 as f64;
    let (a, b, c, d) = (
        img.pixel(y0, x0),
        img.pixel(y0, x1),
        img.pixel(y1, x0),
        img.pixel(y1, x1),
    );
    std::array::from_fn(|k| {
        let top = a[k] + fx * (b[k] - a[k]);
        let bottom = c[k] + fx * (d[k] - c[k]);
        top + fy * (bottom - top)
    })
}

/// Rotate image and mask by `angle_deg` (counter-clockwise as displayed)
/// about the frame center, keeping the frame size.
///
/// Each output pixel is inverse-mapped into the source. Sources outside the
/// frame give `fill` (image) and `0` (mask); inside, the image is sampled
/// bilinearly and the mask takes the nearest pixel.
pub fn rotate_pair(img: &Image, mask: &Mask, angle_deg: f64, fill: f64) -> Result<(Image, Mask)> {
    if !(-90.0..=90.0).contains(&angle_deg) {
        return Err(Error::param(format!(
            "rotation angle {angle_deg} outside [-90, 90]"
        )));
    }
    let (h, w) = (img.height(), img.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::data("image and mask dims differ"));
    }
    if angle_deg == 0.0 {
        return Ok((img.clone(), mask.clone()));
    }
    let (s, c) = sin_cos_deg(angle_deg);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let fill = fill.clamp(0.0, 1.0);
    let mut out_mask = Mask::zeros(h, w);
    let out_img = Image::from_fn(h, w, |y, x| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let xs = cx + c * dx - s * dy;
        let ys = cy + s * dx + c * dy;
        let inside = (-0.5..w as f64 - 0.5).contains(&xs) && (-0.5..h as f64 - 0.5).contains(&ys);
        if !inside {
            return [fill; 3];
        }
        let mx = ((xs + 0.5).floor() as usize).min(w - 1);
        let my = ((ys + 0.5).floor() as usize).min(h - 1);
        out_mask.set(y, x, mask.get(my, mx));
        sample_bilinear(img, xs, ys)
    });
    Ok((out_img, out_mask))
}

//! Mask-consistent augmentation: rotation, reflection and watershed boundary
//! enhancement, expanded deterministically from a seed.

mod rotate;
mod watershed;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, DatasetMeta, Provenance, Sample};
use crate::error::{Error, Result};
use crate::preprocess::{Image, Mask};
use crate::seed;

pub use rotate::rotate_pair;
pub use watershed::{
    dilate3x3, erode3x3, gradient_magnitude, watershed_enhance, watershed_segment, wound_markers,
    FloodKey, WatershedResult, BACKGROUND_LABEL, BOUNDARY_DARKEN, WOUND_LABEL,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotations_per_image: usize,
    pub rotation_range_deg: [f64; 2],
    pub reflect_x: bool,
    pub reflect_y: bool,
    pub watershed: bool,
    /// Ridge cut as a fraction of the maximum gradient magnitude.
    pub watershed_threshold: f64,
    pub fill_value: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotations_per_image: 2,
            rotation_range_deg: [-90.0, 90.0],
            reflect_x: true,
            reflect_y: true,
            watershed: true,
            watershed_threshold: 0.7,
            fill_value: 0.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.rotation_range_deg;
        if !(-90.0 <= lo && lo <= hi && hi <= 90.0) {
            return Err(Error::param(format!(
                "rotation range [{lo}, {hi}] must be ordered and within [-90, 90]"
            )));
        }
        if !(self.watershed_threshold > 0.0 && self.watershed_threshold < 1.0) {
            return Err(Error::param(format!(
                "watershed threshold {} must lie in (0, 1)",
                self.watershed_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::param(format!(
                "fill value {} must lie in [0, 1]",
                self.fill_value
            )));
        }
        Ok(())
    }

    /// Angle of rotated copy `k` of sample `id`; independent of iteration order.
    pub fn rotation_angle(&self, id: &str, k: u64) -> f64 {
        let [lo, hi] = self.rotation_range_deg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.seed, id, k));
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Mirror across the horizontal axis: row order reversed.
    X,
    /// Mirror across the vertical axis: column order reversed.
    Y,
}

pub fn reflect_pair(img: &Image, mask: &Mask, axis: Axis) -> Result<(Image, Mask)> {
    let (h, w) = (img.height(), img.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::data("image and mask dims differ"));
    }
    let src = |y: usize, x: usize| match axis {
        Axis::X => (h - 1 - y, x),
        Axis::Y => (y, w - 1 - x),
    };
    let out_img = Image::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        img.pixel(sy, sx)
    });
    let out_mask = Mask::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        mask.get(sy, sx)
    });
    Ok((out_img, out_mask))
}

/// Expand every sample into the original plus its configured variants.
///
/// Variant ids are `{id}~rot{k}`, `{id}~flipx`, `{id}~flipy` and `{id}~ws`.
/// Samples where watershed enhancement does not apply simply lack `~ws`.
pub fn build_augmented_set(ds: &Dataset, cfg: &AugmentConfig) -> Result<Dataset> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::data("cannot augment an empty dataset"));
    }
    ds.uniform_dims()?;
    let mut samples = Vec::new();
    let mut provenance = ds.meta.provenance.clone();
    for s in ds.samples() {
        samples.push(s.clone());
        let mut push = |suffix: String, transform: &str, angle: Option<f64>, pair: (Image, Mask)| {
            let id = format!("{}~{suffix}", s.id);
            provenance.push(Provenance {
                id: id.clone(),
                parent: s.id.clone(),
                transform: transform.to_string(),
                angle_deg: angle,
            });
            samples.push(Sample {
                id,
                image: pair.0,
                mask: pair.1,
            });
        };
        for k in 0..cfg.rotations_per_image {
            let angle = cfg.rotation_angle(&s.id, k as u64);
            let pair = rotate_pair(&s.image, &s.mask, angle, cfg.fill_value)?;
            push(format!("rot{k}"), "rotate", Some(angle), pair);
        }
        if cfg.reflect_x {
            push("flipx".into(), "reflect_x", None, reflect_pair(&s.image, &s.mask, Axis::X)?);
        }
        if cfg.reflect_y {
            push("flipy".into(), "reflect_y", None, reflect_pair(&s.image, &s.mask, Axis::Y)?);
        }
        if cfg.watershed {
            match watershed_enhance(&s.image, &s.mask, cfg) {
                Ok(pair) => push("ws".into(), "watershed", None, pair),
                Err(Error::Skip(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    provenance.sort_by(|a, b| a.id.cmp(&b.id));
    Dataset::new(
        samples,
        DatasetMeta {
            source: ds.meta.source.clone(),
            preprocessing: ds.meta.preprocessing.clone(),
            provenance,
        },
    )
}

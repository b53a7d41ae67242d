use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::preprocess::{Image, Mask};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Pale skin, soft low-frequency texture, larger rounder wounds.
    Source,
    /// Darker skin, stronger high-frequency texture, smaller irregular wounds.
    Target,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::param(format!("unknown domain {s:?}, expected source or target"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub skin: [f64; 3],
    /// Relative amplitude of the value-noise texture.
    pub texture_amp: f64,
    /// Noise lattice cells across the frame.
    pub texture_cells: usize,
    pub wound_rim: [f64; 3],
    pub wound_core: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub domain: Domain,
    pub size: usize,
    pub seed: u64,
    /// Semi-axis range as a fraction of the frame size.
    pub axis_range: [f64; 2],
    /// Radial perturbation amplitude relative to the ellipse radius.
    pub perturbation: f64,
    pub palette: Palette,
}

impl SyntheticSpec {
    /// Domain defaults for shape and palette.
    pub fn new(n: usize, domain: Domain, size: usize, seed: u64) -> Self {
        let (axis_range, perturbation, palette) = match domain {
            Domain::Source => (
                [0.16, 0.30],
                0.12,
                Palette {
                    skin: [0.80, 0.66, 0.58],
                    texture_amp: 0.06,
                    texture_cells: 4,
                    wound_rim: [0.96, 0.30, 0.26],
                    wound_core: [0.86, 0.16, 0.14],
                },
            ),
            Domain::Target => (
                [0.12, 0.26],
                0.22,
                Palette {
                    skin: [0.52, 0.37, 0.28],
                    texture_amp: 0.16,
                    texture_cells: 10,
                    wound_rim: [0.82, 0.24, 0.16],
                    wound_core: [0.66, 0.14, 0.10],
                },
            ),
        };
        SyntheticSpec {
            n,
            domain,
            size,
            seed,
            axis_range,
            perturbation,
            palette,
        }
    }

    fn max_radius(&self) -> f64 {
        self.axis_range[1] * self.size as f64 * (1.0 + self.perturbation)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.axis_range;
        if self.size < 16 {
            return Err(Error::param(format!("synthetic size {} must be at least 16", self.size)));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::param(format!("axis range [{lo}, {hi}] must be positive and ordered")));
        }
        if !(0.0..0.5).contains(&self.perturbation) {
            return Err(Error::param("perturbation must lie in [0, 0.5)"));
        }
        if lo * self.size as f64 * (1.0 - self.perturbation) < 1.0 {
            return Err(Error::param("smallest wound would be under one pixel"));
        }
        // Wound extent plus the soft edge must fit strictly inside the frame.
        if 2.0 * (self.max_radius() + 3.0) >= self.size as f64 {
            return Err(Error::param("wound axes too large for the frame"));
        }
        let p = &self.palette;
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !(in_unit(&p.skin) && in_unit(&p.wound_rim) && in_unit(&p.wound_core)) {
            return Err(Error::param("palette colors must lie in [0, 1]"));
        }
        if p.texture_cells == 0 || !(0.0..1.0).contains(&p.texture_amp) {
            return Err(Error::param("texture needs at least one cell and amplitude in [0, 1)"));
        }
        Ok(())
    }
}

/// Smooth value noise on a `cells × cells` lattice, values in `[0, 1]`.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut ChaCha8Rng) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
        ValueNoise { cells, lattice }
    }

    /// `u`, `v` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let c = self.cells as f64;
        let (fx, fy) = ((u * c).min(c - 1e-9), (v * c).min(c - 1e-9));
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let l = |x: usize, y: usize| self.lattice[y * (self.cells + 1) + x];
        let top = l(ix, iy) + tx * (l(ix + 1, iy) - l(ix, iy));
        let bot = l(ix, iy + 1) + tx * (l(ix + 1, iy + 1) - l(ix, iy + 1));
        top + ty * (bot - top)
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|k| a[k] + (b[k] - a[k]) * t)
}

/// One sample, determined by `spec` and `index`.
pub fn synthetic_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, "synthetic", index as u64));
    let s = spec.size;
    let sf = s as f64;
    let p = &spec.palette;

    let coarse = ValueNoise::new(p.texture_cells, &mut rng);
    let fine = ValueNoise::new(p.texture_cells * 3, &mut rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.03..0.03));

    let a = rng.gen_range(spec.axis_range[0]..=spec.axis_range[1]) * sf;
    let b = rng.gen_range(spec.axis_range[0]..=spec.axis_range[1]) * sf;
    let phi = rng.gen_range(0.0..std::f64::consts::PI);
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.gen_range(0.0..1.0) / 3.0, rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let margin = (spec.max_radius() + 3.0).ceil() as usize;
    // Integer center so the center pixel is always inside the wound.
    let cx = rng.gen_range(margin..s - margin) as f64;
    let cy = rng.gen_range(margin..s - margin) as f64;
    let wound_noise = ValueNoise::new(6, &mut rng);
    let (sin_p, cos_p) = phi.sin_cos();

    let mut mask = Mask::zeros(s, s);
    let image = Image::from_fn(s, s, |y, x| {
        let (u, v) = (x as f64 / (sf - 1.0), y as f64 / (sf - 1.0));
        let tex = 0.7 * coarse.at(u, v) + 0.3 * fine.at(u, v);
        let shade = 1.0 + p.texture_amp * (2.0 * tex - 1.0);
        let skin: [f64; 3] = std::array::from_fn(|k| (p.skin[k] + tint[k]) * shade);

        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let (ru, rv) = (cos_p * dx + sin_p * dy, -sin_p * dx + cos_p * dy);
        let (eu, ev) = (ru / a, rv / b);
        let rho = eu.hypot(ev);
        let theta = ev.atan2(eu);
        let radius = 1.0
            + spec.perturbation * harmonics.iter().map(|&(k, c, ph)| c * (k * theta + ph).cos()).sum::<f64>();
        let q = rho / radius;
        if q < 1.0 {
            mask.set(y, x, true);
        }
        // Signed distance to the edge in pixels (positive inside), approximated
        // along the radial direction.
        let inside_px = (1.0 - q) * radius * a.min(b);
        let alpha = ((inside_px + 1.0) / 2.0).clamp(0.0, 1.0);
        if alpha == 0.0 {
            return skin;
        }
        let depth = (1.0 - q).clamp(0.0, 1.0).powf(0.7);
        let mottling = 1.0 + 0.08 * (2.0 * wound_noise.at(u, v) - 1.0);
        let wound = lerp3(p.wound_rim, p.wound_core, depth).map(|c| c * mottling);
        lerp3(skin, wound, alpha * alpha * (3.0 - 2.0 * alpha))
    });
    Sample::new(format!("{:?}-{index:04}", spec.domain).to_lowercase(), image, mask)
}

/// `spec.n` samples with ids `{domain}-{index:04}`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.n)
        .map(|i| synthetic_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        samples,
        DatasetMeta {
            source: format!(
                "synthetic {:?} domain, {} px, seed {}",
                spec.domain, spec.size, spec.seed
            )
            .to_lowercase(),
            preprocessing: Vec::new(),
            provenance: Vec::new(),
        },
    )
}

//! Random integer translation followed by rotation about the image centre.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    /// Shifts are drawn uniformly from `[-max, max]` per axis.
    pub max_translation: usize,
    /// Angle range in degrees, counter-clockwise, `lo <= hi`.
    pub rotation_deg: (f64, f64),
    pub interpolation: Interpolation,
    pub fill: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformSpec {
    pub const fn identity() -> Self {
        Self {
            max_translation: 0,
            rotation_deg: (0.0, 0.0),
            interpolation: Interpolation::Bilinear,
            fill: 0.0,
        }
    }

    /// Up to `max_translation` pixels, then a rotation in `[-deg, deg]`.
    pub const fn symmetric(max_translation: usize, deg: f64) -> Self {
        Self {
            max_translation,
            rotation_deg: (-deg, deg),
            interpolation: Interpolation::Bilinear,
            fill: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation_deg;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() || !self.fill.is_finite() {
            return Err(Error::Config(format!("invalid transform {self:?}")));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.max_translation == 0 && self.rotation_deg == (0.0, 0.0)
    }
}

/// One sampled transform: shift by `(rows, cols)` then rotate by
/// `angle_deg` counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub shift: (i64, i64),
    pub angle_deg: f64,
}

pub fn sample_transform(spec: &TransformSpec, rng: &mut impl Rng) -> TransformParams {
    let m = spec.max_translation as i64;
    let shift = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
    let (lo, hi) = spec.rotation_deg;
    let angle_deg = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    TransformParams { shift, angle_deg }
}

/// Applies `params` to an image `(channels, row, col)`. Pixels sampled from
/// outside the image take `spec.fill`.
pub fn transform_image(img: &Tensor, params: &TransformParams, spec: &TransformSpec) -> Result<Tensor> {
    let s = img.shape();
    let &[c, h, w] = s else {
        return Err(Error::shape("transform", format!("image {s:?}")));
    };
    if params.shift == (0, 0) && params.angle_deg == 0.0 {
        return Ok(img.clone());
    }
    let (dy, dx) = params.shift;
    let src = img.data();
    // Translated image lookup, fill outside.
    let shifted = |ch: usize, y: i64, x: i64| -> f64 {
        let (sy, sx) = (y - dy, x - dx);
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            spec.fill
        } else {
            src[(ch * h + sy as usize) * w + sx as usize]
        }
    };
    let theta = params.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // Inverse rotation of the output offset; a quarter turn maps
            // (p, q) to (-q, p) as for the group action.
            let (p, q) = (y as f64 - cy, x as f64 - cx);
            let sy = p * cos + q * sin + cy;
            let sx = -p * sin + q * cos + cx;
            for ch in 0..c {
                out[(ch * h + y) * w + x] = match spec.interpolation {
                    Interpolation::Nearest => shifted(ch, sy.round() as i64, sx.round() as i64),
                    Interpolation::Bilinear => {
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = (sy - y0, sx - x0);
                        let (y0, x0) = (y0 as i64, x0 as i64);
                        let mut v = 0.0;
                        for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
                            for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                                if wy * wx != 0.0 {
                                    v += wy * wx * shifted(ch, yy, xx);
                                }
                            }
                        }
                        v
                    }
                };
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Samples a transform from `spec` and applies it.
pub fn apply_transform(img: &Tensor, spec: &TransformSpec, rng: &mut impl Rng) -> Result<Tensor> {
    let p = sample_transform(spec, rng);
    transform_image(img, &p, spec)
}

/// Ordered transform levels used to build the evaluation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSuiteSpec {
    pub levels: Vec<TransformSpec>,
}

impl Default for TestSuiteSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl TestSuiteSpec {
    /// Untransformed, then a 2-pixel shift with rotations up to 30, 60, 90
    /// and 180 degrees.
    pub fn standard() -> Self {
        let mut levels = vec![TransformSpec::identity()];
        levels.extend([30.0, 60.0, 90.0, 180.0].map(|d| TransformSpec::symmetric(2, d)));
        Self { levels }
    }

    /// Display label per level, e.g. `(2, ±90°)`.
    pub fn labels(&self) -> Vec<String> {
        self.levels
            .iter()
            .map(|l| {
                let (lo, hi) = l.rotation_deg;
                if lo == 0.0 && hi == 0.0 {
                    format!("({}, 0°)", l.max_translation)
                } else if lo == -hi {
                    format!("({}, ±{}°)", l.max_translation, hi)
                } else {
                    format!("({}, {}°..{}°)", l.max_translation, lo, hi)
                }
            })
            .collect()
    }
}

/// Transformed copy of `base` at one level, with the parameters drawn for
/// each image. Deterministic in `(seed, level)`.
pub fn make_test_suite_level(
    base: &Dataset,
    spec: &TestSuiteSpec,
    seed: u64,
    level: usize,
) -> Result<(Dataset, Vec<TransformParams>)> {
    let t = spec
        .levels
        .get(level)
        .ok_or_else(|| Error::Config(format!("no suite level {level}")))?;
    t.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(level as u64);
    let mut params = Vec::with_capacity(base.len());
    let name = format!("{}-suite{}", base.name(), level + 1);
    if t.is_identity() {
        let mut d = base.clone();
        d.name = name;
        return Ok((
            d,
            vec![
                TransformParams {
                    shift: (0, 0),
                    angle_deg: 0.0
                };
                base.len()
            ],
        ));
    }
    let mut err = None;
    let d = base.map_images(name, |_, img| {
        let p = sample_transform(t, &mut rng);
        params.push(p);
        transform_image(img, &p, t).unwrap_or_else(|e| {
            err = Some(e);
            img.clone()
        })
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok((d, params)),
    }
}

pub fn make_test_suites(base: &Dataset, spec: &TestSuiteSpec, seed: u64) -> Result<Vec<Dataset>> {
    (0..spec.levels.len())
        .map(|l| make_test_suite_level(base, spec, seed, l).map(|(d, _)| d))
        .collect()
}

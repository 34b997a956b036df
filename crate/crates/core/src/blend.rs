//! Environment-aware blending: squashing raw predictions into a blending map
//! and compositing a deformed patch over its background.

use crate::error::{check_same_dims, Error, Result};
use crate::grid::{Grid, Mask, Patch, SceneImage};
use crate::placement::BoundingBox;

pub const ALPHA_MIN: f64 = 0.8;
pub const ALPHA_MAX: f64 = 1.2;

/// Per-pixel multiplier of the foreground weight, always in `[0.8, 1.2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl BlendMap {
    pub fn uniform(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::InvalidConfig(format!(
                "blend map of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        for (index, &value) in values.iter().enumerate() {
            if !(ALPHA_MIN..=ALPHA_MAX).contains(&value) {
                return Err(Error::OutOfRange {
                    index,
                    value,
                    lo: ALPHA_MIN,
                    hi: ALPHA_MAX,
                });
            }
        }
        Ok(Self { height, width, values })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// `alpha = 1 + 0.2 * tanh(raw)`, clamped against rounding at the asymptotes.
#[inline]
pub fn squash_value(raw: f64) -> f64 {
    (1.0 + 0.2 * raw.tanh()).clamp(ALPHA_MIN, ALPHA_MAX)
}

/// Squashes a single-channel grid of raw predictions into a [`BlendMap`].
/// NaN inputs map to the neutral value 1.
pub fn squash_alpha(raw: &Grid) -> BlendMap {
    let values = raw
        .plane(0)
        .iter()
        .map(|&r| if r.is_nan() { 1.0 } else { squash_value(r) })
        .collect();
    BlendMap {
        height: raw.height(),
        width: raw.width(),
        values,
    }
}

/// Blends `z_w` over `background` with per-pixel weight `s_j * alpha`,
/// clamping the result into `[0, 1]`.
pub fn compose(z_w: &Patch, s_j: &Mask, alpha: &BlendMap, background: &Patch) -> Result<Patch> {
    check_same_dims(z_w.dims(), s_j.dims())?;
    check_same_dims(z_w.dims(), alpha.dims())?;
    check_same_dims(z_w.dims(), background.dims())?;
    let (h, w) = z_w.dims();
    Ok(Patch::from_fn(h, w, |c, y, x| {
        let weight = s_j.get(y, x) * alpha.get(y, x);
        if weight == 0.0 {
            return background.get(c, y, x);
        }
        weight * z_w.get(c, y, x) + (1.0 - weight) * background.get(c, y, x)
    }))
}

/// Replaces the pixels under `bbox` by `patch` resized to the box.
pub fn paste_into_scene(scene: &SceneImage, patch: &Patch, bbox: &BoundingBox) -> Result<SceneImage> {
    let (x0, y0, x1, y1) = bbox.pixel_rect();
    let (h, w) = scene.pixels.dims();
    if x0 < 0 || y0 < 0 || x1 > w as i64 || y1 > h as i64 || x1 <= x0 || y1 <= y0 {
        return Err(Error::BoxOutOfBounds {
            rect: (x0, y0, x1 - x0, y1 - y0),
            height: h,
            width: w,
        });
    }
    let (bw, bh) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let resized = patch.resize(bh, bw);
    let mut out = scene.clone();
    for c in 0..3 {
        for y in 0..bh {
            for x in 0..bw {
                out.pixels
                    .set(c, y0 as usize + y, x0 as usize + x, resized.get(c, y, x));
            }
        }
    }
    Ok(out)
}

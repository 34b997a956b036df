//! Scene geometry: the bottom-edge/height linear law for pedestrian boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels; `y` is the top edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self { x, y, width, height }
    }

    pub fn y_bottom(&self) -> f64 {
        self.y + self.height
    }

    /// Integer pixel rectangle `(x0, y0, x1, y1)`, half-open, used for pasting.
    pub fn pixel_rect(&self) -> (i64, i64, i64, i64) {
        (
            self.x.round() as i64,
            self.y.round() as i64,
            (self.x + self.width).round() as i64,
            self.y_bottom().round() as i64,
        )
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        let eps = 1e-9;
        self.width > 0.0
            && self.height > 0.0
            && self.x >= -eps
            && self.y >= -eps
            && self.x + self.width <= width as f64 + eps
            && self.y_bottom() <= height as f64 + eps
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let h = self.y_bottom().min(other.y_bottom()) - self.y.max(other.y);
        w.max(0.0) * h.max(0.0)
    }

    pub fn overlaps(&self, other: &BoundingBox) -> bool {
        self.intersection_area(other) > 0.0
    }
}

/// `height = k * y_bottom + b` with a fixed width/height ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementModel {
    pub k: f64,
    pub b: f64,
    #[serde(rename = "rho")]
    pub aspect_ratio: f64,
    pub image_height: usize,
    pub image_width: usize,
    /// Relative height noise bound: sampled heights lie within `±jitter` of the line.
    pub jitter: f64,
    #[serde(default = "default_min_height")]
    pub min_height: f64,
}

fn default_min_height() -> f64 {
    PlacementModel::MIN_HEIGHT
}

impl PlacementModel {
    pub const CALTECH_K: f64 = 1.15;
    pub const CALTECH_B: f64 = -194.24;
    pub const DEFAULT_ASPECT_RATIO: f64 = 0.41;
    pub const DEFAULT_JITTER: f64 = 0.05;
    pub const MIN_HEIGHT: f64 = 20.0;

    /// Statistics of 480x640 street-scene frames.
    pub fn caltech() -> Self {
        Self {
            k: Self::CALTECH_K,
            b: Self::CALTECH_B,
            aspect_ratio: Self::DEFAULT_ASPECT_RATIO,
            image_height: 480,
            image_width: 640,
            jitter: Self::DEFAULT_JITTER,
            min_height: Self::MIN_HEIGHT,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.aspect_ratio > 0.0 && self.aspect_ratio.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "aspect ratio must be positive, got {}",
                self.aspect_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::InvalidConfig(format!(
                "jitter must lie in [0, 1), got {}",
                self.jitter
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::EmptyDimensions {
                height: self.image_height,
                width: self.image_width,
            });
        }
        if !(self.k.is_finite() && self.b.is_finite()) {
            return Err(Error::InvalidConfig("non-finite line coefficients".into()));
        }
        Ok(())
    }

    /// The same law for an image scaled to `height x width`: the slope is
    /// scale-free and the intercept scales with the image height.
    pub fn rescaled(&self, height: usize, width: usize) -> Self {
        let s = height as f64 / self.image_height as f64;
        Self {
            b: self.b * s,
            image_height: height,
            image_width: width,
            ..self.clone()
        }
    }

    pub fn line_height(&self, y_bottom: f64) -> f64 {
        self.k * y_bottom + self.b
    }

    /// Box with bottom edge `y_bottom`, relative height offset `u` and left edge `x`.
    pub fn box_at(&self, y_bottom: f64, u: f64, x: f64) -> BoundingBox {
        let height = self.line_height(y_bottom) * (1.0 + u);
        BoundingBox::new(x, y_bottom - height, self.aspect_ratio * height, height)
    }

    /// Range of bottom edges for which every jittered box fits the image.
    pub fn feasible_bottoms(&self) -> Option<(f64, f64)> {
        let j = self.jitter;
        let mut lo = 0.0f64;
        let mut hi = self.image_height as f64;
        // Each constraint has the form a * y >= c.
        let constraints = [
            // smallest jittered height stays above the minimum
            (self.k * (1.0 - j), self.min_height - (1.0 - j) * self.b),
            // tallest jittered box keeps its top edge inside
            (1.0 - (1.0 + j) * self.k, (1.0 + j) * self.b),
            // widest jittered box fits horizontally
            (
                -self.aspect_ratio * (1.0 + j) * self.k,
                self.aspect_ratio * (1.0 + j) * self.b - self.image_width as f64,
            ),
        ];
        for (a, c) in constraints {
            if a > 0.0 {
                lo = lo.max(c / a);
            } else if a < 0.0 {
                hi = hi.min(c / a);
            } else if c > 0.0 {
                return None;
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

/// Ordinary least squares of height on bottom edge; aspect ratio is the
/// median width/height ratio.
pub fn fit(boxes: &[BoundingBox], image_height: usize, image_width: usize) -> Result<PlacementModel> {
    let mut bottoms: Vec<f64> = boxes.iter().map(BoundingBox::y_bottom).collect();
    bottoms.sort_by(f64::total_cmp);
    bottoms.dedup();
    if bottoms.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 distinct bottom edges, got {}",
            bottoms.len()
        )));
    }
    let n = boxes.len() as f64;
    let mean_y = boxes.iter().map(BoundingBox::y_bottom).sum::<f64>() / n;
    let mean_h = boxes.iter().map(|b| b.height).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for bx in boxes {
        let dy = bx.y_bottom() - mean_y;
        sxy += dy * (bx.height - mean_h);
        sxx += dy * dy;
    }
    if !(sxx > f64::EPSILON * n * mean_y.abs().max(1.0)) {
        return Err(Error::DegenerateFit(format!(
            "bottom-edge variance {sxx} is degenerate"
        )));
    }
    let k = sxy / sxx;
    let b = mean_h - k * mean_y;

    let mut ratios: Vec<f64> = boxes
        .iter()
        .filter(|b| b.height > 0.0)
        .map(|b| b.width / b.height)
        .collect();
    ratios.sort_by(f64::total_cmp);
    let aspect_ratio = match ratios.len() {
        0 => PlacementModel::DEFAULT_ASPECT_RATIO,
        m if m % 2 == 1 => ratios[m / 2],
        m => 0.5 * (ratios[m / 2 - 1] + ratios[m / 2]),
    };
    let model = PlacementModel {
        k,
        b,
        aspect_ratio,
        image_height,
        image_width,
        jitter: PlacementModel::DEFAULT_JITTER,
        min_height: PlacementModel::MIN_HEIGHT,
    };
    model.validate()?;
    Ok(model)
}

/// Draws a box whose height follows the line up to the model's jitter.
pub fn sample_placement<R: Rng + ?Sized>(model: &PlacementModel, rng: &mut R) -> Result<BoundingBox> {
    model.validate()?;
    let (lo, hi) = model.feasible_bottoms().ok_or_else(|| {
        Error::InfeasiblePlacement(format!(
            "no bottom edge admits a box for h = {:.4}*y + {:.4}, rho {:.3}, jitter {:.3} in {}x{}",
            model.k, model.b, model.aspect_ratio, model.jitter, model.image_height, model.image_width
        ))
    })?;
    let y_bottom = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let u = if model.jitter > 0.0 {
        rng.gen_range(-model.jitter..=model.jitter)
    } else {
        0.0
    };
    let width = model.aspect_ratio * model.line_height(y_bottom) * (1.0 + u);
    let max_x = (model.image_width as f64 - width).max(0.0);
    let x = if max_x > 0.0 { rng.gen_range(0.0..=max_x) } else { 0.0 };
    Ok(model.box_at(y_bottom, u, x))
}

/// Number of instances to synthesise for one image, uniform on `1..=5`.
pub fn sample_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.gen_range(1..=5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn from_line(k: f64, b: f64, y: f64) -> BoundingBox {
        let h = k * y + b;
        BoundingBox::new(0.0, y - h, 0.41 * h, h)
    }

    #[test]
    fn two_point_fit() {
        let boxes = [
            BoundingBox::new(0.0, 150.0, 60.0, 150.0),
            BoundingBox::new(0.0, 135.0, 100.0, 265.0),
        ];
        let m = fit(&boxes, 480, 640).unwrap();
        assert!((m.k - 1.15).abs() < 1e-12);
        assert!((m.b + 195.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_fit_is_exact() {
        let boxes: Vec<_> = (0..50)
            .map(|i| from_line(1.15, -194.24, 250.0 + 4.5 * i as f64))
            .collect();
        let m = fit(&boxes, 480, 640).unwrap();
        assert!((m.k - 1.15).abs() < 1e-9);
        assert!((m.b + 194.24).abs() < 1e-9);
        assert!((m.aspect_ratio - 0.41).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(fit(&[from_line(1.0, 0.0, 100.0)], 480, 640).is_err());
        let same = [from_line(1.0, 0.0, 100.0), from_line(1.0, 0.0, 100.0)];
        assert!(matches!(fit(&same, 480, 640), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn caltech_box_at_400() {
        let m = PlacementModel::caltech().with_jitter(0.0);
        let b = m.box_at(400.0, 0.0, 0.0);
        assert!((b.height - 265.76).abs() < 1e-9);
        assert!((b.width - 0.41 * 265.76).abs() < 1e-9);
        assert!((b.width - 108.96).abs() < 0.01);
        assert_eq!(b.y_bottom(), 400.0);
    }

    #[test]
    fn infeasible_model_is_reported() {
        let mut m = PlacementModel::caltech();
        m.b = -10_000.0;
        assert!(matches!(
            sample_placement(&m, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InfeasiblePlacement(_))
        ));
    }

    #[test]
    fn rescaling_keeps_slope() {
        let m = PlacementModel::caltech().rescaled(240, 320);
        assert_eq!(m.k, 1.15);
        assert!((m.b + 97.12).abs() < 1e-12);
        assert!((m.line_height(200.0) - 0.5 * PlacementModel::caltech().line_height(400.0)).abs() < 1e-12);
    }

    #[test]
    fn sampled_boxes_obey_contract() {
        let m = PlacementModel::caltech().with_jitter(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let b = sample_placement(&m, &mut rng).unwrap();
            assert!(b.fits_in(480, 640), "{b:?}");
            let line = m.line_height(b.y_bottom());
            assert!((b.height - line).abs() <= 0.1 * line + 1e-9);
            assert!((b.width / b.height - m.aspect_ratio).abs() <= 1e-12);
            assert!(b.height >= 20.0 - 1e-9);
        }
    }

    #[test]
    fn sample_count_is_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<usize> = (0..10_000).map(|_| sample_count(&mut rng)).collect();
        assert!(draws.iter().all(|n| (1..=5).contains(n)));
        let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
        assert!((mean - 3.0).abs() < 0.05, "{mean}");
    }

    proptest! {
        #[test]
        fn sampling_is_deterministic(seed in any::<u64>()) {
            let m = PlacementModel::caltech();
            let a = sample_placement(&m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_placement(&m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

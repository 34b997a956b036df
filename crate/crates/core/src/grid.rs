//! Planar raster containers shared by every stage of the engine.
//!
//! [`Grid`] is an unconstrained multi-channel array of `f64` values stored
//! channel-major (`c, y, x`). [`Mask`] and [`Patch`] wrap it with the value
//! range and channel count their roles require.

use crate::error::{check_same_dims, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::EmptyDimensions { height, width });
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidConfig(format!(
                "grid of {}x{}x{} needs {} values, got {}",
                channels,
                height,
                width,
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Mean absolute difference over every element.
    pub fn mean_abs_diff(&self, other: &Grid) -> Result<f64> {
        check_same_dims(self.dims(), other.dims())?;
        if self.channels != other.channels {
            return Err(Error::InvalidConfig(format!(
                "channel mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Resamples to a new size with half-pixel-centred bilinear interpolation.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps_y: Vec<_> = (0..height)
            .map(|y| resize_tap((y as f64 + 0.5) * sy - 0.5, self.height))
            .collect();
        let taps_x: Vec<_> = (0..width)
            .map(|x| resize_tap((x as f64 + 0.5) * sx - 0.5, self.width))
            .collect();
        let mut out = Grid::zeros(height, width, self.channels);
        for c in 0..self.channels {
            let src = self.plane(c);
            let w = self.width;
            let dst = out.plane_mut(c);
            for (y, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                for (x, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                    let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                    let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                    dst[y * width + x] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
        out
    }
}

fn resize_tap(pos: f64, len: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let i0 = (pos.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Grids whose values are confined to `[0, 1]`.
pub trait Raster: Sized {
    fn grid(&self) -> &Grid;

    /// Wraps a grid produced by a range-preserving operation, clamping
    /// rounding excursions back into `[0, 1]`.
    fn from_convex(grid: Grid) -> Self;
}

fn validate_unit(data: &[f64]) -> Result<()> {
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange {
                index,
                value,
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    Ok(())
}

fn clamp_unit(mut grid: Grid) -> Grid {
    for v in grid.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    grid
}

/// Single-channel foreground weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Grid);

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let grid = Grid::from_vec(height, width, 1, values)?;
        validate_unit(grid.data())?;
        Ok(Self(grid))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::zeros(height, width, 1))
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::InvalidConfig(format!(
                "mask needs 1 channel, got {}",
                grid.channels()
            )));
        }
        validate_unit(grid.data())?;
        Ok(Self(grid))
    }

    /// Builds a binary mask from a predicate over `(y, x)`.
    pub fn from_predicate(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(
            height,
            width,
            1,
            |_, y, x| {
                if f(y, x) {
                    1.0
                } else {
                    0.0
                }
            },
        ))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(0, y, x)
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.0.set(0, y, x, v.clamp(0.0, 1.0));
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn is_binary(&self) -> bool {
        self.values().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn binarize(&self, threshold: f64) -> Mask {
        Self(self.0.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
    }

    pub fn count_foreground(&self, threshold: f64) -> usize {
        self.values().iter().filter(|&&v| v >= threshold).count()
    }

    /// Row range `[top, bottom]` containing any value `>= threshold`.
    pub fn vertical_extent(&self, threshold: f64) -> Option<(usize, usize)> {
        let w = self.width();
        let rows = (0..self.height()).filter(|&y| self.values()[y * w..(y + 1) * w].iter().any(|&v| v >= threshold));
        let mut top = None;
        let mut bottom = None;
        for y in rows {
            top.get_or_insert(y);
            bottom = Some(y);
        }
        top.zip(bottom)
    }

    pub fn resize(&self, height: usize, width: usize) -> Mask {
        Self(self.0.resize_bilinear(height, width)).binarize(0.5)
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

impl Raster for Mask {
    fn grid(&self) -> &Grid {
        &self.0
    }

    fn from_convex(grid: Grid) -> Self {
        Self(clamp_unit(grid))
    }
}

/// Three-channel (R, G, B) intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch(Grid);

impl Patch {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let grid = Grid::from_vec(height, width, Self::CHANNELS, values)?;
        validate_unit(grid.data())?;
        Ok(Self(grid))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self(Grid::from_fn(height, width, 3, |c, _, _| rgb[c].clamp(0.0, 1.0)))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Self(Grid::from_fn(height, width, 3, |c, y, x| f(c, y, x).clamp(0.0, 1.0)))
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.channels() != Self::CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "patch needs 3 channels, got {}",
                grid.channels()
            )));
        }
        validate_unit(grid.data())?;
        Ok(Self(grid))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.get(c, y, x)
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.0.set(c, y, x, v.clamp(0.0, 1.0));
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn resize(&self, height: usize, width: usize) -> Patch {
        Self::from_convex(self.0.resize_bilinear(height, width))
    }

    /// Copies the `height x width` region whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Patch> {
        if y0 + height > self.height() || x0 + width > self.width() || height == 0 || width == 0 {
            return Err(Error::BoxOutOfBounds {
                rect: (x0 as i64, y0 as i64, width as i64, height as i64),
                height: self.height(),
                width: self.width(),
            });
        }
        Ok(Self(Grid::from_fn(height, width, 3, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        })))
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

impl Raster for Patch {
    fn grid(&self) -> &Grid {
        &self.0
    }

    fn from_convex(grid: Grid) -> Self {
        Self(clamp_unit(grid))
    }
}

/// A full image being augmented, identified within its dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub id: String,
    pub pixels: Patch,
}

impl SceneImage {
    pub fn new(id: impl Into<String>, pixels: Patch) -> Self {
        Self { id: id.into(), pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(matches!(
            Mask::new(1, 2, vec![0.0, 1.5]),
            Err(Error::OutOfRange { index: 1, .. })
        ));
        assert!(matches!(Mask::new(0, 2, vec![]), Err(Error::EmptyDimensions { .. })));
        assert!(matches!(
            Mask::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let g = Grid::from_fn(5, 7, 2, |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(g.resize_bilinear(5, 7), g);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let g = Grid::filled(4, 6, 1, 0.3);
        let r = g.resize_bilinear(9, 2);
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn vertical_extent_of_empty_mask_is_none() {
        assert_eq!(Mask::zeros(3, 3).vertical_extent(0.5), None);
        let m = Mask::from_predicate(5, 3, |y, _| (1..=3).contains(&y));
        assert_eq!(m.vertical_extent(0.5), Some((1, 3)));
    }

    #[test]
    fn crop_checks_bounds() {
        let p = Patch::filled(4, 4, [0.1, 0.2, 0.3]);
        assert!(p.crop(2, 2, 3, 1).is_err());
        assert_eq!(p.crop(1, 1, 2, 2).unwrap().dims(), (2, 2));
    }
}

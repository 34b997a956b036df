//! Dense displacement fields and differentiable bilinear backward warping.
//!
//! Output pixel `(x, y)` reads the input at `(x + dx, y + dy)`. Sample
//! coordinates outside the image are clamped to the border, which makes the
//! derivative with respect to that coordinate zero. At integer sample
//! coordinates the derivative of the right (or lower) cell is used; the last
//! row and column fall back to the only adjacent cell.

use crate::error::{check_same_dims, Error, Result};
use crate::grid::{Grid, Raster};

#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    height: usize,
    width: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl WarpField {
    pub fn new(height: usize, width: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyDimensions { height, width });
        }
        let n = height * width;
        if dx.len() != n || dy.len() != n {
            return Err(Error::InvalidConfig(format!(
                "field of {height}x{width} needs {n} vectors, got {} / {}",
                dx.len(),
                dy.len()
            )));
        }
        if let Some(index) = dx.iter().chain(&dy).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { height, width, dx, dy })
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            dx: vec![dx; n],
            dy: vec![dy; n],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut field = Self::constant(height, width, 0.0, 0.0);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                field.dx[y * width + x] = dx;
                field.dy[y * width + x] = dy;
            }
        }
        field
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
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn dx_mut(&mut self) -> &mut [f64] {
        &mut self.dx
    }

    pub fn dy_mut(&mut self) -> &mut [f64] {
        &mut self.dy
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.dx.iter().chain(&self.dy).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// The all-zero displacement field.
pub fn identity_field(height: usize, width: usize) -> WarpField {
    WarpField::constant(height, width, 0.0, 0.0)
}

/// Bilinear tap along one axis: `(i0, i1, frac, slope_active)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
    /// False when the coordinate was clamped, i.e. the derivative is zero.
    pub active: bool,
}

#[inline]
pub(crate) fn tap(pos: f64, len: usize) -> Tap {
    if len == 1 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: 0.0,
            active: false,
        };
    }
    let last = (len - 1) as f64;
    if pos < 0.0 {
        Tap {
            i0: 0,
            i1: 1,
            frac: 0.0,
            active: false,
        }
    } else if pos >= last {
        Tap {
            i0: len - 2,
            i1: len - 1,
            frac: 1.0,
            active: pos == last,
        }
    } else {
        let i0 = pos.floor() as usize;
        Tap {
            i0,
            i1: i0 + 1,
            frac: pos - i0 as f64,
            active: true,
        }
    }
}

/// Warps every channel of `grid` by `field`.
pub fn warp_grid(grid: &Grid, field: &WarpField) -> Result<Grid> {
    check_same_dims(field.dims(), grid.dims())?;
    let (h, w) = grid.dims();
    let mut out = Grid::zeros(h, w, grid.channels());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let tx = tap(x as f64 + field.dx[i], w);
            let ty = tap(y as f64 + field.dy[i], h);
            for c in 0..grid.channels() {
                let src = grid.plane(c);
                let top = (1.0 - tx.frac) * src[ty.i0 * w + tx.i0] + tx.frac * src[ty.i0 * w + tx.i1];
                let bot = (1.0 - tx.frac) * src[ty.i1 * w + tx.i0] + tx.frac * src[ty.i1 * w + tx.i1];
                out.plane_mut(c)[i] = (1.0 - ty.frac) * top + ty.frac * bot;
            }
        }
    }
    Ok(out)
}

/// Warps a mask or patch. Bilinear sampling is a convex combination, so the
/// result stays in `[0, 1]`.
pub fn warp<R: Raster>(raster: &R, field: &WarpField) -> Result<R> {
    warp_grid(raster.grid(), field).map(R::from_convex)
}

/// Vector-Jacobian product of [`warp_grid`]: given `upstream = dL/d(out)`,
/// returns `(dL/d(grid), dL/d(field))`.
pub fn warp_vjp(grid: &Grid, field: &WarpField, upstream: &Grid) -> Result<(Grid, WarpField)> {
    check_same_dims(field.dims(), grid.dims())?;
    check_same_dims(grid.dims(), upstream.dims())?;
    if grid.channels() != upstream.channels() {
        return Err(Error::InvalidConfig(format!(
            "upstream has {} channels, grid has {}",
            upstream.channels(),
            grid.channels()
        )));
    }
    let (h, w) = grid.dims();
    let mut grid_grad = Grid::zeros(h, w, grid.channels());
    let mut field_grad = identity_field(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let tx = tap(x as f64 + field.dx[i], w);
            let ty = tap(y as f64 + field.dy[i], h);
            let (i00, i01) = (ty.i0 * w + tx.i0, ty.i0 * w + tx.i1);
            let (i10, i11) = (ty.i1 * w + tx.i0, ty.i1 * w + tx.i1);
            let (fx, fy) = (tx.frac, ty.frac);
            let mut gdx = 0.0;
            let mut gdy = 0.0;
            for c in 0..grid.channels() {
                let g = upstream.plane(c)[i];
                if g == 0.0 {
                    continue;
                }
                let src = grid.plane(c);
                let (v00, v01, v10, v11) = (src[i00], src[i01], src[i10], src[i11]);
                if tx.active {
                    gdx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                }
                if ty.active {
                    gdy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                let dst = grid_grad.plane_mut(c);
                dst[i00] += g * (1.0 - fx) * (1.0 - fy);
                dst[i01] += g * fx * (1.0 - fy);
                dst[i10] += g * (1.0 - fx) * fy;
                dst[i11] += g * fx * fy;
            }
            field_grad.dx[i] = gdx;
            field_grad.dy[i] = gdy;
        }
    }
    Ok((grid_grad, field_grad))
}

/// Central-difference estimate of `d loss(warp(grid, field)) / d field`.
pub fn finite_diff_field_grad(
    grid: &Grid,
    field: &WarpField,
    loss: impl Fn(&Grid) -> f64,
    h: f64,
) -> Result<WarpField> {
    let mut probe = field.clone();
    let mut out = identity_field(field.height, field.width);
    let eval = |f: &WarpField| warp_grid(grid, f).map(|g| loss(&g));
    for i in 0..field.dx.len() {
        let orig = probe.dx[i];
        probe.dx[i] = orig + h;
        let plus = eval(&probe)?;
        probe.dx[i] = orig - h;
        let minus = eval(&probe)?;
        probe.dx[i] = orig;
        out.dx[i] = (plus - minus) / (2.0 * h);

        let orig = probe.dy[i];
        probe.dy[i] = orig + h;
        let plus = eval(&probe)?;
        probe.dy[i] = orig - h;
        let minus = eval(&probe)?;
        probe.dy[i] = orig;
        out.dy[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Parameterisation of a full-resolution field by a coarse lattice with node
/// spacing `stride`, bilinearly upsampled.
#[derive(Clone, Debug)]
pub struct CoarseLattice {
    height: usize,
    width: usize,
    stride: usize,
    nodes_y: usize,
    nodes_x: usize,
    taps_y: Vec<Tap>,
    taps_x: Vec<Tap>,
}

impl CoarseLattice {
    pub fn new(height: usize, width: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        let nodes_y = (height - 1).div_ceil(stride) + 1;
        let nodes_x = (width - 1).div_ceil(stride) + 1;
        let taps_y = (0..height).map(|y| tap(y as f64 / stride as f64, nodes_y)).collect();
        let taps_x = (0..width).map(|x| tap(x as f64 / stride as f64, nodes_x)).collect();
        Self {
            height,
            width,
            stride,
            nodes_y,
            nodes_x,
            taps_y,
            taps_x,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn node_dims(&self) -> (usize, usize) {
        (self.nodes_y, self.nodes_x)
    }

    pub fn node_count(&self) -> usize {
        self.nodes_y * self.nodes_x
    }

    fn upsample_plane(&self, nodes: &[f64], out: &mut [f64]) {
        let nx = self.nodes_x;
        for (y, ty) in self.taps_y.iter().enumerate() {
            for (x, tx) in self.taps_x.iter().enumerate() {
                let top = (1.0 - tx.frac) * nodes[ty.i0 * nx + tx.i0] + tx.frac * nodes[ty.i0 * nx + tx.i1];
                let bot = (1.0 - tx.frac) * nodes[ty.i1 * nx + tx.i0] + tx.frac * nodes[ty.i1 * nx + tx.i1];
                out[y * self.width + x] = (1.0 - ty.frac) * top + ty.frac * bot;
            }
        }
    }

    fn adjoint_plane(&self, grad: &[f64], out: &mut [f64]) {
        let nx = self.nodes_x;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (y, ty) in self.taps_y.iter().enumerate() {
            for (x, tx) in self.taps_x.iter().enumerate() {
                let g = grad[y * self.width + x];
                if g == 0.0 {
                    continue;
                }
                out[ty.i0 * nx + tx.i0] += g * (1.0 - tx.frac) * (1.0 - ty.frac);
                out[ty.i0 * nx + tx.i1] += g * tx.frac * (1.0 - ty.frac);
                out[ty.i1 * nx + tx.i0] += g * (1.0 - tx.frac) * ty.frac;
                out[ty.i1 * nx + tx.i1] += g * tx.frac * ty.frac;
            }
        }
    }

    /// Expands node values `[dx nodes..., dy nodes...]` to a full field.
    pub fn upsample(&self, params: &[f64]) -> WarpField {
        let n = self.node_count();
        let mut field = identity_field(self.height, self.width);
        self.upsample_plane(&params[..n], &mut field.dx);
        self.upsample_plane(&params[n..2 * n], &mut field.dy);
        field
    }

    /// Pulls a full-resolution field gradient back onto the nodes.
    pub fn adjoint(&self, grad: &WarpField, out: &mut [f64]) {
        let n = self.node_count();
        let (gx, gy) = out.split_at_mut(n);
        self.adjoint_plane(&grad.dx, gx);
        self.adjoint_plane(&grad.dy, &mut gy[..n]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mask_l1;
    use crate::grid::{Mask, Patch};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(values: &[f64]) -> Grid {
        Grid::from_vec(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn identity_field_is_all_zero() {
        let f = identity_field(3, 3);
        assert!((0..3).all(|y| (0..3).all(|x| f.get(y, x) == (0.0, 0.0))));
        let m = Mask::from_predicate(5, 5, |y, x| y > x);
        assert_eq!(warp(&m, &identity_field(5, 5)).unwrap(), m);
        assert_eq!(mask_l1(&warp(&m, &identity_field(5, 5)).unwrap(), &m).unwrap(), 0.0);
    }

    #[test]
    fn integer_shift_clamps_at_edge() {
        let out = warp_grid(&row(&[10.0, 20.0, 30.0]), &WarpField::constant(1, 3, 1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[20.0, 30.0, 30.0]);
    }

    #[test]
    fn half_pixel_shift_averages() {
        let out = warp_grid(&row(&[10.0, 20.0]), &WarpField::constant(1, 2, 0.5, 0.0)).unwrap();
        assert_eq!(out.data()[0], 15.0);
    }

    #[test]
    fn flat_image_has_zero_field_gradient() {
        let g = Grid::filled(6, 6, 3, 0.7);
        let up = Grid::filled(6, 6, 3, 1.0);
        let (_, fg) = warp_vjp(&g, &identity_field(6, 6), &up).unwrap();
        assert!(fg.dx().iter().chain(fg.dy()).all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_gradient_is_one() {
        let g = Grid::from_fn(4, 6, 1, |_, _, x| x as f64);
        let mut up = Grid::zeros(4, 6, 1);
        up.set(0, 2, 3, 1.0);
        let (gg, fg) = warp_vjp(&g, &identity_field(4, 6), &up).unwrap();
        assert_eq!(fg.get(2, 3), (1.0, 0.0));
        assert_eq!(gg.get(0, 2, 3), 1.0);
        assert_eq!(gg.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn vjp_rejects_mismatch() {
        let g = Grid::zeros(3, 3, 1);
        assert!(warp_vjp(&g, &identity_field(3, 4), &g).is_err());
        assert!(warp_vjp(&g, &identity_field(3, 3), &Grid::zeros(3, 3, 2)).is_err());
        assert!(warp_grid(&g, &identity_field(2, 3)).is_err());
    }

    #[test]
    fn field_rejects_non_finite() {
        assert!(WarpField::new(1, 1, vec![f64::NAN], vec![0.0]).is_err());
        assert!(WarpField::new(1, 2, vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn finite_diff_on_constant_image_vanishes() {
        let g = Grid::filled(5, 5, 1, 0.4);
        let f = WarpField::from_fn(5, 5, |y, x| (0.3 * x as f64 - 0.7, 0.2 * y as f64));
        let fd = finite_diff_field_grad(&g, &f, |o| o.data().iter().map(|v| v * v).sum(), 1e-3).unwrap();
        assert!(fd.max_abs() < 1e-9);
    }

    #[test]
    fn finite_diff_quadratic_loss_on_ramp() {
        // Ramp v(x) = 2x, identity field, loss = sum(out^2): dL/ddx = 2*v*v' = 8x.
        // Central differences are exact for a quadratic in dx (h=1e-3 stays in one cell).
        let g = Grid::from_fn(3, 5, 1, |_, _, x| 2.0 * x as f64);
        let f = WarpField::constant(3, 5, 0.25, 0.0);
        let fd = finite_diff_field_grad(&g, &f, |o| o.data().iter().map(|v| v * v).sum(), 1e-3).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let expected = 8.0 * (x as f64 + 0.25);
                assert!((fd.get(y, x).0 - expected).abs() < 1e-6, "{x}: {:?}", fd.get(y, x));
                assert!(fd.get(y, x).1.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn vjp_matches_finite_diff_off_lattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Grid::from_fn(8, 8, 2, |_, _, _| rng.gen::<f64>());
        let up = Grid::from_fn(8, 8, 2, |_, _, _| rng.gen::<f64>() - 0.5);
        let f = WarpField::from_fn(8, 8, |_, _| {
            (
                rng.gen_range(-2.0..2.0f64).floor() + rng.gen_range(0.1..0.9),
                rng.gen_range(-2.0..2.0f64).floor() + rng.gen_range(0.1..0.9),
            )
        });
        let (_, analytic) = warp_vjp(&g, &f, &up).unwrap();
        let loss = |o: &Grid| o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>();
        let numeric = finite_diff_field_grad(&g, &f, loss, 1e-4).unwrap();
        for (a, n) in analytic
            .dx()
            .iter()
            .chain(analytic.dy())
            .zip(numeric.dx().iter().chain(numeric.dy()))
        {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn interior_translation_is_exact() {
        let g = Grid::from_fn(10, 10, 1, |_, y, x| (y * 10 + x) as f64);
        let out = warp_grid(&g, &WarpField::constant(10, 10, 2.0, -1.0)).unwrap();
        for y in 1..10 {
            for x in 0..8 {
                assert_eq!(out.get(0, y, x), g.get(0, y - 1, x + 2));
            }
        }
    }

    #[test]
    fn lattice_upsample_of_constant_is_constant() {
        let lat = CoarseLattice::new(9, 7, 4);
        assert_eq!(lat.node_dims(), (3, 3));
        let mut params = vec![-3.0; lat.node_count()];
        params.extend(vec![1.5; lat.node_count()]);
        let f = lat.upsample(&params);
        assert!(f.dx().iter().all(|&v| v == -3.0));
        assert!(f.dy().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn lattice_adjoint_is_transpose() {
        let lat = CoarseLattice::new(10, 13, 4);
        let n = lat.node_count();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..2 * n).map(|_| rng.gen::<f64>()).collect();
        let g = WarpField::from_fn(10, 13, |_, _| (rng.gen::<f64>(), rng.gen::<f64>()));
        let up = lat.upsample(&p);
        let lhs: f64 = up
            .dx()
            .iter()
            .zip(g.dx())
            .chain(up.dy().iter().zip(g.dy()))
            .map(|(a, b)| a * b)
            .sum();
        let mut adj = vec![0.0; 2 * n];
        lat.adjoint(&g, &mut adj);
        let rhs: f64 = p.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn grid_strategy() -> impl Strategy<Value = (Grid, Grid, WarpField)> {
        (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
            let n = h * w;
            (
                proptest::collection::vec(0.0f64..=1.0, n),
                proptest::collection::vec(0.0f64..=1.0, n),
                proptest::collection::vec((-4.0f64..4.0, -4.0f64..4.0), n),
            )
                .prop_map(move |(a, b, v)| {
                    (
                        Grid::from_vec(h, w, 1, a).unwrap(),
                        Grid::from_vec(h, w, 1, b).unwrap(),
                        WarpField::from_fn(h, w, |y, x| v[y * w + x]),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn zero_field_is_exact_identity((a, _, _) in grid_strategy()) {
            let (h, w) = a.dims();
            prop_assert_eq!(warp_grid(&a, &identity_field(h, w)).unwrap(), a);
        }

        #[test]
        fn warp_is_linear_in_intensity((a, b, f) in grid_strategy(), s in -3.0f64..3.0, t in -3.0f64..3.0) {
            let combo = Grid::from_vec(a.height(), a.width(), 1,
                a.data().iter().zip(b.data()).map(|(x, y)| s * x + t * y).collect()).unwrap();
            let lhs = warp_grid(&combo, &f).unwrap();
            let (wa, wb) = (warp_grid(&a, &f).unwrap(), warp_grid(&b, &f).unwrap());
            for ((l, x), y) in lhs.data().iter().zip(wa.data()).zip(wb.data()) {
                prop_assert!((l - (s * x + t * y)).abs() < 1e-6);
            }
        }

        #[test]
        fn warp_preserves_unit_range((a, _, f) in grid_strategy()) {
            let out = warp_grid(&a, &f).unwrap();
            prop_assert!(out.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
            let p = Patch::from_fn(a.height(), a.width(), |_, y, x| a.get(0, y, x));
            let wp = warp(&p, &f).unwrap();
            prop_assert!(wp.grid().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

//! Row-span description of silhouettes and the shape constraining blend.
//!
//! A silhouette row is summarised by the midpoint `c` and width `l` of its
//! foreground interval. Pixel `x` covers the half-open interval
//! `[x - 0.5, x + 0.5)`, so a span covers columns
//! `round_half_up(c - l/2 + 0.5) .. round_half_up(c + l/2 + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_same_dims, Error, Result};
use crate::grid::Mask;

/// Foreground summary of one mask row. `center` is `None` for empty rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSpan {
    pub y: usize,
    pub center: Option<f64>,
    pub width: f64,
}

impl RowSpan {
    pub fn empty(y: usize) -> Self {
        Self {
            y,
            center: None,
            width: 0.0,
        }
    }

    pub fn new(y: usize, center: f64, width: f64) -> Self {
        if width <= 0.0 {
            return Self::empty(y);
        }
        Self {
            y,
            center: Some(center),
            width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_none() || self.width <= 0.0
    }

    /// Half-open column range covered by this span.
    pub fn columns(&self) -> Option<(i64, i64)> {
        let c = self.center?;
        if self.width <= 0.0 {
            return None;
        }
        let start = round_half_up(c - self.width / 2.0 + 0.5);
        let end = round_half_up(c + self.width / 2.0 + 0.5);
        Some((start, end))
    }
}

fn round_half_up(v: f64) -> i64 {
    // Absorb representation error so that e.g. 2.4999999999999996 counts as a tie.
    (v + 0.5 + 1e-9).floor() as i64
}

/// Weighting of the target shape as a function of the row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum GammaProfile {
    /// Rises linearly from 0 at the top of the ramp domain to 1 at its bottom.
    #[default]
    LinearRamp,
    Constant {
        value: f64,
    },
    /// Values sampled uniformly over the ramp domain, linearly interpolated.
    Table {
        values: Vec<f64>,
    },
}

impl GammaProfile {
    /// Evaluates the weight at row `y` for a ramp spanning rows `top..=bottom`.
    pub fn eval(&self, y: usize, top: usize, bottom: usize) -> f64 {
        let t = if bottom > top {
            ((y as f64 - top as f64) / (bottom - top) as f64).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let g = match self {
            GammaProfile::LinearRamp => t,
            GammaProfile::Constant { value } => *value,
            GammaProfile::Table { values } => match values.len() {
                0 => 0.0,
                1 => values[0],
                n => {
                    let pos = t * (n - 1) as f64;
                    let i = (pos.floor() as usize).min(n - 2);
                    let f = pos - i as f64;
                    (1.0 - f) * values[i] + f * values[i + 1]
                }
            },
        };
        g.clamp(0.0, 1.0)
    }
}

/// One span per row over columns with value `>= threshold`. Rows with
/// several runs are summarised by their bounding interval.
pub fn row_spans(mask: &Mask, threshold: f64) -> Vec<RowSpan> {
    let w = mask.width();
    mask.values()
        .chunks(w)
        .enumerate()
        .map(|(y, row)| {
            let first = row.iter().position(|&v| v >= threshold);
            let last = row.iter().rposition(|&v| v >= threshold);
            match (first, last) {
                (Some(lo), Some(hi)) => RowSpan {
                    y,
                    center: Some((lo + hi) as f64 / 2.0),
                    width: (hi - lo + 1) as f64,
                },
                _ => RowSpan::empty(y),
            }
        })
        .collect()
}

/// Paints spans into a binary mask. Rows without a span stay empty.
pub fn rasterize(spans: &[RowSpan], height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::EmptyDimensions { height, width });
    }
    let mut mask = Mask::zeros(height, width);
    for (index, span) in spans.iter().enumerate() {
        if span.y >= height {
            return Err(Error::SpanOutOfBounds { index, width });
        }
        let Some((start, end)) = span.columns() else {
            continue;
        };
        if start < 0 || end > width as i64 {
            return Err(Error::SpanOutOfBounds { index, width });
        }
        for x in start..end {
            mask.set(span.y, x as usize, 1.0);
        }
    }
    Ok(mask)
}

/// Blends two span sets row by row with per-row weights `gammas`.
///
/// Empty rows borrow the other shape's midpoint so only the width shrinks.
pub fn blend_spans(source: &[RowSpan], target: &[RowSpan], gammas: &[f64]) -> Vec<RowSpan> {
    source
        .iter()
        .zip(target)
        .zip(gammas)
        .map(|((si, sj), &g)| {
            debug_assert_eq!(si.y, sj.y);
            let (ci, li) = (si.center, if si.is_empty() { 0.0 } else { si.width });
            let (cj, lj) = (sj.center, if sj.is_empty() { 0.0 } else { sj.width });
            match (ci, cj) {
                (None, None) => RowSpan::empty(si.y),
                (Some(ci), None) => RowSpan::new(si.y, ci, (1.0 - g) * li),
                (None, Some(cj)) => RowSpan::new(si.y, cj, g * lj),
                (Some(ci), Some(cj)) => RowSpan::new(si.y, g * cj + (1.0 - g) * ci, g * lj + (1.0 - g) * li),
            }
        })
        .collect()
}

/// Per-row weights of `gamma` evaluated over the joint vertical extent of
/// both shapes.
pub fn gamma_weights(s_i: &Mask, s_j: &Mask, gamma: &GammaProfile) -> Vec<f64> {
    let extent = match (s_i.vertical_extent(0.5), s_j.vertical_extent(0.5)) {
        (Some(a), Some(b)) => Some((a.0.min(b.0), a.1.max(b.1))),
        (a, b) => a.or(b),
    };
    let (top, bottom) = extent.unwrap_or((0, s_i.height().saturating_sub(1)));
    (0..s_i.height()).map(|y| gamma.eval(y, top, bottom)).collect()
}

/// Pulls the target shape `s_j` towards the source `s_i`, strongly at the
/// top of the body and not at all at the bottom for a linear ramp.
pub fn constrain_shape(s_i: &Mask, s_j: &Mask, gamma: &GammaProfile) -> Result<Mask> {
    check_same_dims(s_i.dims(), s_j.dims())?;
    let gammas = gamma_weights(s_i, s_j, gamma);
    let spans = blend_spans(&row_spans(s_i, 0.5), &row_spans(s_j, 0.5), &gammas);
    rasterize(&spans, s_i.height(), s_i.width())
}

/// Mean absolute difference between two masks.
pub fn mask_l1(a: &Mask, b: &Mask) -> Result<f64> {
    check_same_dims(a.dims(), b.dims())?;
    let sum: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.values().len() as f64)
}

/// Intersection over union of the binarised masks; 1 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask, threshold: f64) -> Result<f64> {
    check_same_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (fa, fb) = (x >= threshold, y >= threshold);
        inter += (fa && fb) as usize;
        union += (fa || fb) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
        Mask::from_predicate(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
    }

    #[test]
    fn spans_of_small_rows() {
        let m = Mask::from_predicate(4, 4, |y, x| y == 1 && (1..=2).contains(&x));
        let spans = row_spans(&m, 0.5);
        assert_eq!(spans.len(), 4);
        assert_eq!(spans[1], RowSpan::new(1, 1.5, 2.0));
        assert!(spans[0].is_empty() && spans[0].center.is_none());

        let m = Mask::from_predicate(1, 5, |_, x| (1..=3).contains(&x));
        assert_eq!(row_spans(&m, 0.5)[0], RowSpan::new(0, 2.0, 3.0));
    }

    #[test]
    fn empty_mask_has_only_empty_spans() {
        let spans = row_spans(&Mask::zeros(3, 5), 0.5);
        assert!(spans.iter().all(|s| s.width == 0.0 && s.center.is_none()));
        assert_eq!(rasterize(&spans, 3, 5).unwrap(), Mask::zeros(3, 5));
    }

    #[test]
    fn multi_run_rows_use_bounding_interval() {
        let m = Mask::from_predicate(1, 8, |_, x| x == 1 || x == 5);
        assert_eq!(row_spans(&m, 0.5)[0], RowSpan::new(0, 3.0, 5.0));
    }

    #[test]
    fn rasterize_small_span() {
        let m = rasterize(&[RowSpan::new(1, 1.5, 2.0)], 4, 4).unwrap();
        let expected = Mask::from_predicate(4, 4, |y, x| y == 1 && (1..=2).contains(&x));
        assert_eq!(m, expected);
    }

    #[test]
    fn rasterize_rejects_out_of_bounds_span() {
        let spans = [RowSpan::new(0, 1.0, 2.0), RowSpan::new(1, 3.5, 2.0)];
        assert!(matches!(
            rasterize(&spans, 2, 4),
            Err(Error::SpanOutOfBounds { index: 1, .. })
        ));
        let spans = [RowSpan::new(0, -1.0, 2.0)];
        assert!(matches!(
            rasterize(&spans, 2, 4),
            Err(Error::SpanOutOfBounds { index: 0, .. })
        ));
        let spans = [RowSpan::new(5, 1.0, 1.0)];
        assert!(rasterize(&spans, 2, 4).is_err());
    }

    #[test]
    fn rectangle_round_trips() {
        let m = rect(12, 10, 2, 9, 3, 7);
        assert_eq!(rasterize(&row_spans(&m, 0.5), 12, 10).unwrap(), m);
    }

    #[test]
    fn constrain_endpoints() {
        let si = rect(10, 12, 1, 9, 2, 6);
        let sj = rect(10, 12, 2, 8, 5, 11);
        let zero = constrain_shape(&si, &sj, &GammaProfile::Constant { value: 0.0 }).unwrap();
        assert_eq!(row_spans(&zero, 0.5), row_spans(&si, 0.5));
        let one = constrain_shape(&si, &sj, &GammaProfile::Constant { value: 1.0 }).unwrap();
        assert_eq!(row_spans(&one, 0.5), row_spans(&sj, 0.5));
    }

    #[test]
    fn worked_row_blend() {
        let out = blend_spans(&[RowSpan::new(0, 10.0, 4.0)], &[RowSpan::new(0, 20.0, 8.0)], &[0.5]);
        assert_eq!(out[0], RowSpan::new(0, 15.0, 6.0));
    }

    #[test]
    fn degenerate_rows_interpolate_width_only() {
        let out = blend_spans(
            &[RowSpan::new(0, 10.0, 4.0), RowSpan::empty(1), RowSpan::empty(2)],
            &[RowSpan::empty(0), RowSpan::new(1, 6.0, 8.0), RowSpan::empty(2)],
            &[0.25, 0.25, 0.5],
        );
        assert_eq!(out[0], RowSpan::new(0, 10.0, 3.0));
        assert_eq!(out[1], RowSpan::new(1, 6.0, 2.0));
        assert!(out[2].is_empty());
    }

    #[test]
    fn ramp_domain_is_joint_foreground_extent() {
        let si = rect(20, 8, 4, 10, 2, 5);
        let sj = rect(20, 8, 6, 15, 2, 5);
        let g = gamma_weights(&si, &sj, &GammaProfile::LinearRamp);
        assert_eq!(g[4], 0.0);
        assert_eq!(g[14], 1.0);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[19], 1.0);
        assert!((g[9] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gamma_table_interpolates() {
        let g = GammaProfile::Table {
            values: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(g.eval(0, 0, 4), 0.0);
        assert_eq!(g.eval(2, 0, 4), 1.0);
        assert!((g.eval(1, 0, 4) - 0.5).abs() < 1e-12);
        assert_eq!(GammaProfile::Constant { value: 3.0 }.eval(0, 0, 1), 1.0);
    }

    #[test]
    fn constrain_rejects_mismatch() {
        assert!(constrain_shape(&Mask::zeros(3, 3), &Mask::zeros(3, 4), &GammaProfile::LinearRamp).is_err());
    }

    #[test]
    fn l1_and_iou_spot_values() {
        let a = rect(4, 4, 0, 4, 0, 4);
        assert_eq!(mask_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(mask_l1(&a, &Mask::zeros(4, 4)).unwrap(), 1.0);
        let p = Mask::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(mask_l1(&p, &Mask::zeros(2, 2)).unwrap(), 0.25);

        assert_eq!(mask_iou(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(mask_iou(&Mask::zeros(2, 2), &Mask::zeros(2, 2), 0.5).unwrap(), 1.0);
        let left = rect(4, 4, 0, 2, 0, 2);
        let right = rect(4, 4, 2, 4, 2, 4);
        assert_eq!(mask_iou(&left, &right, 0.5).unwrap(), 0.0);
        let shifted = rect(4, 4, 0, 2, 1, 3);
        assert!((mask_iou(&left, &shifted, 0.5).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!(mask_l1(&a, &Mask::zeros(4, 5)).is_err());
        assert!(mask_iou(&a, &Mask::zeros(5, 4), 0.5).is_err());
    }

    fn single_run_mask() -> impl Strategy<Value = Mask> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec((0..w, 0..=w), h).prop_map(move |rows| {
                Mask::from_predicate(h, w, |y, x| {
                    let (a, b) = rows[y];
                    let (lo, hi) = (a.min(b), a.max(b));
                    x >= lo && x < hi
                })
            })
        })
    }

    fn unit_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(0.0f64..=1.0, h * w).prop_map(move |v| Mask::new(h, w, v).unwrap())
    }

    proptest! {
        #[test]
        fn round_trip_single_run_rows(m in single_run_mask()) {
            let spans = row_spans(&m, 0.5);
            prop_assert_eq!(rasterize(&spans, m.height(), m.width()).unwrap(), m);
        }

        #[test]
        fn l1_is_a_metric(a in unit_mask(4, 5), b in unit_mask(4, 5), c in unit_mask(4, 5)) {
            let ab = mask_l1(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_l1(&b, &a).unwrap());
            prop_assert_eq!(mask_l1(&a, &a).unwrap(), 0.0);
            prop_assert!(ab > 0.0 || a == b);
            prop_assert!(ab <= mask_l1(&a, &c).unwrap() + mask_l1(&c, &b).unwrap() + 1e-12);
        }

        #[test]
        fn blended_rows_lie_between_sources(
            ci in 2.0f64..30.0, li in 1.0f64..4.0,
            cj in 2.0f64..30.0, lj in 1.0f64..4.0,
            g in 0.0f64..=1.0,
        ) {
            let out = blend_spans(&[RowSpan::new(0, ci, li)], &[RowSpan::new(0, cj, lj)], &[g]);
            let c = out[0].center.unwrap();
            prop_assert!(c >= ci.min(cj) - 1e-12 && c <= ci.max(cj) + 1e-12);
            prop_assert!(out[0].width >= li.min(lj) - 1e-12 && out[0].width <= li.max(lj) + 1e-12);
        }

        #[test]
        fn constrained_rows_lie_between_sources(
            a in single_run_mask(), g in 0.0f64..=1.0,
        ) {
            // Second shape: the first mirrored horizontally.
            let (h, w) = a.dims();
            let b = Mask::from_predicate(h, w, |y, x| a.get(y, w - 1 - x) >= 0.5);
            let gammas = vec![g; h];
            let (si, sj) = (row_spans(&a, 0.5), row_spans(&b, 0.5));
            for (o, (p, q)) in blend_spans(&si, &sj, &gammas).iter().zip(si.iter().zip(&sj)) {
                if let (Some(c), Some(cp), Some(cq)) = (o.center, p.center, q.center) {
                    prop_assert!(c >= cp.min(cq) - 1e-12 && c <= cp.max(cq) + 1e-12);
                }
            }
            let gamma = GammaProfile::Constant { value: g };
            prop_assert!(constrain_shape(&a, &b, &gamma).is_ok());
        }
    }
}

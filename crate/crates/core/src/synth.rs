//! Procedural pedestrian-like silhouettes, textured exemplars and street
//! scenes used as a test bed and as a source of exact oracles.
//!
//! Silhouettes are the per-row hull of a head disc, a shoulder-tapered torso
//! and two leg strips, so every row holds a single run of foreground.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::row_spans;
use crate::grid::{Mask, Patch, SceneImage};
use crate::placement::{sample_placement, BoundingBox, PlacementModel};
use crate::warp::WarpField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteParams {
    pub patch_height: usize,
    pub patch_width: usize,
    pub center_x: f64,
    pub top_y: f64,
    pub head_radius: f64,
    pub torso_width: f64,
    pub torso_height: f64,
    /// Fraction of the torso width removed at the shoulder line.
    pub shoulder_taper: f64,
    /// Angle of each leg from vertical, in degrees.
    pub leg_spread_deg: f64,
    pub leg_length: f64,
    pub leg_width: f64,
    pub pose_seed: u64,
}

impl SilhouetteParams {
    /// Draws proportions scaled to a `height x width` patch, keeping at least
    /// `margin` background pixels on every side.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, margin: usize) -> Self {
        let (hf, wf) = (height as f64, width as f64);
        let avail = hf - 2.0 * margin as f64 - 2.0;
        let overall = avail * rng.gen_range(0.78..0.97);
        let head_radius = overall * rng.gen_range(0.07..0.09);
        let torso_height = overall * rng.gen_range(0.34..0.40);
        let leg_length = overall - 2.0 * head_radius - torso_height + 0.1 * head_radius;
        let torso_width = (wf * rng.gen_range(0.17..0.24)).max(2.5 * head_radius);
        let leg_width = torso_width * rng.gen_range(0.36..0.48);
        let leg_spread_deg = rng.gen_range(0.0..12.0);
        let top_y = margin as f64 + 1.0 + rng.gen_range(0.0..=(avail - overall).max(0.0));
        let center_x = wf / 2.0 + rng.gen_range(-0.05..0.05) * wf;
        Self {
            patch_height: height,
            patch_width: width,
            center_x,
            top_y,
            head_radius,
            torso_width,
            torso_height,
            shoulder_taper: rng.gen_range(0.15..0.35),
            leg_spread_deg,
            leg_length,
            leg_width,
            pose_seed: rng.gen(),
        }
    }

    fn hip_y(&self) -> f64 {
        self.neck_y() + self.torso_height
    }

    fn neck_y(&self) -> f64 {
        self.top_y + 1.8 * self.head_radius
    }

    pub fn overall_height(&self) -> f64 {
        self.hip_y() + self.leg_length - self.top_y
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.head_radius,
            self.torso_width,
            self.torso_height,
            self.leg_length,
            self.leg_width,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidSilhouette("body dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.shoulder_taper) {
            return Err(Error::InvalidSilhouette("shoulder taper must lie in [0, 1)".into()));
        }
        if !(0.0..60.0).contains(&self.leg_spread_deg) {
            return Err(Error::InvalidSilhouette(
                "leg spread must lie in [0, 60) degrees".into(),
            ));
        }
        if self.patch_height == 0 || self.patch_width == 0 {
            return Err(Error::EmptyDimensions {
                height: self.patch_height,
                width: self.patch_width,
            });
        }
        Ok(())
    }
}

/// Per-leg pose offsets drawn from the silhouette's rng.
#[derive(Clone, Copy, Debug)]
struct LegPose {
    left_deg: f64,
    right_deg: f64,
    lean: f64,
}

fn row_hull(p: &SilhouetteParams, pose: LegPose, yc: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut add = |a: f64, b: f64| {
        lo = lo.min(a);
        hi = hi.max(b);
    };
    let head_cy = p.top_y + p.head_radius;
    let dy = yc - head_cy;
    if dy.abs() <= p.head_radius {
        let half = (p.head_radius * p.head_radius - dy * dy).sqrt();
        add(p.center_x - half, p.center_x + half);
    }
    let (neck, hip) = (p.neck_y(), p.hip_y());
    if (neck..=hip).contains(&yc) {
        let t = ((yc - neck) / (0.25 * p.torso_height)).min(1.0);
        let half = 0.5 * p.torso_width * (1.0 - p.shoulder_taper * (1.0 - t));
        let cx = p.center_x + pose.lean * (yc - neck) / p.torso_height;
        add(cx - half, cx + half);
    }
    let leg_top = hip - 0.5 * p.leg_width;
    if (leg_top..=hip + p.leg_length).contains(&yc) {
        let d = (yc - leg_top).max(0.0);
        let hip_cx = p.center_x + pose.lean;
        let offset = 0.5 * (p.torso_width - p.leg_width);
        let left = hip_cx - offset - d * pose.left_deg.to_radians().tan();
        let right = hip_cx + offset + d * pose.right_deg.to_radians().tan();
        add(left - 0.5 * p.leg_width, right + 0.5 * p.leg_width);
    }
    (hi > lo).then_some((lo, hi))
}

/// Rasterises a silhouette; every row holds at most one run and the runs of
/// consecutive rows overlap.
pub fn gen_silhouette<R: Rng + ?Sized>(params: &SilhouetteParams, rng: &mut R) -> Result<Mask> {
    params.validate()?;
    let pose = LegPose {
        left_deg: (params.leg_spread_deg + rng.gen_range(-1.5..1.5)).max(0.0),
        right_deg: (params.leg_spread_deg + rng.gen_range(-1.5..1.5)).max(0.0),
        lean: rng.gen_range(-0.4..0.4),
    };
    let (h, w) = (params.patch_height, params.patch_width);
    let mut runs: Vec<Option<(usize, usize)>> = Vec::with_capacity(h);
    for y in 0..h {
        let run = row_hull(params, pose, y as f64 + 0.5).and_then(|(lo, hi)| {
            let start = lo.round();
            let end = hi.round();
            (end > start).then_some((start, end))
        });
        match run {
            Some((start, end)) if start < 0.0 || end > w as f64 => {
                return Err(Error::InvalidSilhouette(format!(
                    "row {y} spans [{start}, {end}) outside a patch of width {w}"
                )));
            }
            Some((start, end)) => runs.push(Some((start as usize, end as usize))),
            None => runs.push(None),
        }
    }
    let rows: Vec<usize> = (0..h).filter(|&y| runs[y].is_some()).collect();
    let (Some(&first), Some(&last)) = (rows.first(), rows.last()) else {
        return Err(Error::InvalidSilhouette("silhouette has no foreground".into()));
    };
    if first == 0 || last == h - 1 {
        return Err(Error::InvalidSilhouette("silhouette touches the patch border".into()));
    }
    for y in first..last {
        let (Some(a), Some(b)) = (runs[y], runs[y + 1]) else {
            return Err(Error::InvalidSilhouette(format!("gap below row {y}")));
        };
        if a.0 >= b.1 || b.0 >= a.1 {
            return Err(Error::InvalidSilhouette(format!("rows {y} and {} do not touch", y + 1)));
        }
    }
    Ok(Mask::from_predicate(h, w, |y, x| {
        runs[y].is_some_and(|(s, e)| (s..e).contains(&x))
    }))
}

/// Where an exemplar came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSource {
    pub id: String,
    /// Tight box of the silhouette inside the patch.
    pub silhouette_box: BoundingBox,
    pub seed: u64,
}

/// A real-looking pedestrian patch `z_i` with its mask `s_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PedestrianExemplar {
    pub patch: Patch,
    pub mask: Mask,
    pub source: ExemplarSource,
}

/// Smooth bounded noise: the sum of the two sinusoid products never exceeds
/// `amplitude` in magnitude.
#[derive(Clone, Copy, Debug)]
struct SmoothNoise {
    amplitude: f64,
    freq: [(f64, f64); 2],
    phase: [(f64, f64); 2],
    mix: f64,
}

impl SmoothNoise {
    fn random<R: Rng + ?Sized>(rng: &mut R, amplitude: f64) -> Self {
        let mut f = || (rng.gen_range(0.15..0.6), rng.gen_range(0.15..0.6));
        let freq = [f(), f()];
        let mut p = || {
            (
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        };
        let phase = [p(), p()];
        Self {
            amplitude,
            freq,
            phase,
            mix: rng.gen_range(0.3..0.7),
        }
    }

    fn at(&self, y: usize, x: usize, channel: usize) -> f64 {
        let (x, y) = (x as f64, y as f64 + 3.0 * channel as f64);
        let a = (self.freq[0].0 * x + self.phase[0].0).sin() * (self.freq[0].1 * y + self.phase[0].1).cos();
        let b = (self.freq[1].0 * x + self.phase[1].0).cos() * (self.freq[1].1 * y + self.phase[1].1).sin();
        self.amplitude * (self.mix * a + (1.0 - self.mix) * b)
    }
}

pub const TEXTURE_AMPLITUDE: f64 = 0.15;

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
    ]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fills a silhouette with a two-band texture over a distinct background.
pub fn gen_exemplar<R: Rng + ?Sized>(params: &SilhouetteParams, rng: &mut R) -> Result<PedestrianExemplar> {
    let seed: u64 = rng.gen();
    let mask = gen_silhouette(params, rng)?;
    let shirt = random_color(rng);
    let mut trousers = random_color(rng);
    while color_distance(shirt, trousers) < 0.15 {
        trousers = random_color(rng);
    }
    let mut background = random_color(rng);
    while color_distance(background, shirt) < 0.3 || color_distance(background, trousers) < 0.3 {
        background = random_color(rng);
    }
    let fg_noise = SmoothNoise::random(rng, TEXTURE_AMPLITUDE);
    let bg_noise = SmoothNoise::random(rng, TEXTURE_AMPLITUDE);
    let hip = params.hip_y();
    let (h, w) = mask.dims();
    let patch = Patch::from_fn(h, w, |c, y, x| {
        if mask.get(y, x) >= 0.5 {
            let base = if (y as f64 + 0.5) < hip { shirt[c] } else { trousers[c] };
            base + fg_noise.at(y, x, c)
        } else {
            background[c] + bg_noise.at(y, x, c)
        }
    });
    let (top, bottom) = mask.vertical_extent(0.5).expect("silhouette is nonempty");
    let spans = row_spans(&mask, 0.5);
    let (mut left, mut right) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &spans {
        if let Some(c) = s.center {
            left = left.min(c - s.width / 2.0 + 0.5);
            right = right.max(c + s.width / 2.0 + 0.5);
        }
    }
    Ok(PedestrianExemplar {
        patch,
        mask,
        source: ExemplarSource {
            id: format!("synth-{seed:016x}"),
            silhouette_box: BoundingBox::new(left, top as f64, right - left, (bottom - top + 1) as f64),
            seed,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PairMode {
    /// Integer shift of the source mask; comes with an exact oracle field.
    Translate { dx: i64, dy: i64 },
    /// Same body with the legs spread further apart.
    ScaleLegs { extra_deg: f64 },
    /// Two independent silhouettes.
    Arbitrary,
}

#[derive(Clone, Debug)]
pub struct ShapePair {
    pub source: PedestrianExemplar,
    pub target: Mask,
    /// Constant field that maps the source mask exactly onto the target.
    pub oracle: Option<WarpField>,
}

impl ShapePair {
    pub fn has_oracle(&self) -> bool {
        self.oracle.is_some()
    }
}

const MAX_ATTEMPTS: usize = 64;

fn retry<T, R: Rng + ?Sized>(rng: &mut R, mut f: impl FnMut(&mut R) -> Result<T>) -> Result<T> {
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        match f(rng) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Builds a source exemplar and a target shape of size `height x width`.
pub fn make_pair<R: Rng + ?Sized>(mode: PairMode, height: usize, width: usize, rng: &mut R) -> Result<ShapePair> {
    match mode {
        PairMode::Translate { dx, dy } => {
            let margin = dx.unsigned_abs().max(dy.unsigned_abs()) as usize + 1;
            let source = retry(rng, |r| {
                let p = SilhouetteParams::random(r, height, width, margin);
                gen_exemplar(&p, r)
            })?;
            let target = Mask::from_predicate(height, width, |y, x| {
                let (sy, sx) = (y as i64 - dy, x as i64 - dx);
                sy >= 0
                    && sx >= 0
                    && (sy as usize) < height
                    && (sx as usize) < width
                    && source.mask.get(sy as usize, sx as usize) >= 0.5
            });
            let oracle = WarpField::constant(height, width, -dx as f64, -dy as f64);
            Ok(ShapePair {
                source,
                target,
                oracle: Some(oracle),
            })
        }
        PairMode::ScaleLegs { extra_deg } => retry(rng, |r| {
            let params = SilhouetteParams::random(r, height, width, 2);
            let pose_seed: u64 = r.gen();
            let mut pose_rng = ChaCha8Rng::seed_from_u64(pose_seed);
            let source = gen_exemplar(&params, &mut pose_rng)?;
            let wider = SilhouetteParams {
                leg_spread_deg: params.leg_spread_deg + extra_deg,
                ..params
            };
            let mut pose_rng = ChaCha8Rng::seed_from_u64(pose_seed);
            let target = gen_exemplar(&wider, &mut pose_rng)?.mask;
            Ok(ShapePair {
                source,
                target,
                oracle: None,
            })
        }),
        PairMode::Arbitrary => {
            let source = retry(rng, |r| {
                let p = SilhouetteParams::random(r, height, width, 2);
                gen_exemplar(&p, r)
            })?;
            let target = retry(rng, |r| {
                let p = SilhouetteParams::random(r, height, width, 2);
                gen_silhouette(&p, r)
            })?;
            Ok(ShapePair {
                source,
                target,
                oracle: None,
            })
        }
    }
}

/// Draws a random exemplar of the given size.
pub fn random_exemplar<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<PedestrianExemplar> {
    retry(rng, |r| {
        let p = SilhouetteParams::random(r, height, width, 2);
        gen_exemplar(&p, r)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Law the planted pedestrians follow.
    pub placement: PlacementModel,
    pub pedestrians: usize,
    /// Resolution at which planted exemplars are generated.
    pub exemplar_size: usize,
}

impl SceneParams {
    /// A small street frame with the 480x640 statistics rescaled to it.
    pub fn small_street(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            placement: PlacementModel::caltech().rescaled(height, width).with_jitter(0.0),
            pedestrians: 3,
            exemplar_size: 64,
        }
    }
}

/// Renders a gradient sky over textured ground and plants exemplars at boxes
/// drawn from the placement law.
pub fn gen_scene<R: Rng + ?Sized>(params: &SceneParams, rng: &mut R) -> Result<(Patch, Vec<BoundingBox>)> {
    let (h, w) = (params.height, params.width);
    if h == 0 || w == 0 {
        return Err(Error::EmptyDimensions { height: h, width: w });
    }
    let horizon = h as f64 * rng.gen_range(0.3..0.45);
    let sky_top = [
        rng.gen_range(0.3..0.5),
        rng.gen_range(0.5..0.7),
        rng.gen_range(0.75..0.95),
    ];
    let sky_low = [
        rng.gen_range(0.7..0.9),
        rng.gen_range(0.75..0.9),
        rng.gen_range(0.8..0.95),
    ];
    let ground = [
        rng.gen_range(0.25..0.45),
        rng.gen_range(0.25..0.45),
        rng.gen_range(0.25..0.45),
    ];
    let noise = SmoothNoise::random(rng, 0.08);
    let mut scene = Patch::from_fn(h, w, |c, y, x| {
        let yf = y as f64;
        if yf < horizon {
            let t = yf / horizon;
            (1.0 - t) * sky_top[c] + t * sky_low[c]
        } else {
            ground[c] + noise.at(y, x, c) + 0.05 * ((yf - horizon) / (h as f64 - horizon))
        }
    });
    let mut boxes = Vec::with_capacity(params.pedestrians);
    for _ in 0..params.pedestrians {
        let bbox = sample_placement(&params.placement, rng)?;
        let exemplar = random_exemplar(params.exemplar_size, params.exemplar_size, rng)?;
        let (x0, y0, x1, y1) = bbox.pixel_rect();
        let (bw, bh) = ((x1 - x0).max(1) as usize, (y1 - y0).max(1) as usize);
        let patch = exemplar.patch.resize(bh, bw);
        let mask = exemplar.mask.resize(bh, bw);
        for y in 0..bh {
            for x in 0..bw {
                let (sy, sx) = (y0 as usize + y, x0 as usize + x);
                if mask.get(y, x) >= 0.5 && sy < h && sx < w {
                    for c in 0..3 {
                        scene.set(c, sy, sx, patch.get(c, y, x));
                    }
                }
            }
        }
        boxes.push(bbox);
    }
    Ok((scene, boxes))
}

/// [`gen_scene`] wrapped as an identified scene image.
pub fn gen_scene_image<R: Rng + ?Sized>(
    id: impl Into<String>,
    params: &SceneParams,
    rng: &mut R,
) -> Result<(SceneImage, Vec<BoundingBox>)> {
    let (pixels, boxes) = gen_scene(params, rng)?;
    Ok((SceneImage::new(id, pixels), boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rasterize, row_spans};
    use crate::placement::fit;
    use crate::solver::loss_shape;
    use crate::warp::{identity_field, warp};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn runs_per_row(mask: &Mask) -> Vec<usize> {
        let (h, w) = mask.dims();
        (0..h)
            .map(|y| {
                (0..w)
                    .filter(|&x| mask.get(y, x) >= 0.5 && (x == 0 || mask.get(y, x - 1) < 0.5))
                    .count()
            })
            .collect()
    }

    #[test]
    fn silhouettes_are_single_run_and_roundtrip() {
        let mut r = rng(1);
        for _ in 0..200 {
            let p = SilhouetteParams::random(&mut r, 64, 64, 2);
            let Ok(m) = gen_silhouette(&p, &mut r) else { continue };
            assert!(m.is_binary());
            assert!(runs_per_row(&m).iter().all(|&n| n <= 1));
            assert_eq!(rasterize(&row_spans(&m, 0.5), 64, 64).unwrap(), m);
        }
    }

    #[test]
    fn zero_spread_merges_legs() {
        let mut p = SilhouetteParams::random(&mut rng(2), 64, 48, 2);
        p.leg_spread_deg = 0.0;
        let m = gen_silhouette(&p, &mut rng(3)).unwrap();
        assert!(runs_per_row(&m).iter().all(|&n| n <= 1));
        let same = gen_silhouette(&p, &mut rng(3)).unwrap();
        assert_eq!(m, same);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = SilhouetteParams::random(&mut rng(4), 64, 64, 2);
        p.head_radius = -1.0;
        assert!(gen_silhouette(&p, &mut rng(0)).is_err());
        let mut p = SilhouetteParams::random(&mut rng(4), 64, 64, 2);
        p.center_x = 200.0;
        assert!(gen_silhouette(&p, &mut rng(0)).is_err());
    }

    #[test]
    fn exemplar_texture_partitions_by_mask() {
        let ex = random_exemplar(64, 64, &mut rng(5)).unwrap();
        assert_eq!(ex.mask.dims(), ex.patch.dims());
        assert!(ex.mask.count_foreground(0.5) > 0);
        // Foreground pixels sit within the noise band of one of two colours,
        // background pixels within the band of a third, far-off colour.
        let mut fg_colors: Vec<[f64; 3]> = Vec::new();
        let (h, w) = ex.mask.dims();
        let mut bg_sum = [0.0; 3];
        let mut bg_n = 0.0;
        for y in 0..h {
            for x in 0..w {
                let px = ex.patch.pixel(y, x);
                assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
                if ex.mask.get(y, x) < 0.5 {
                    for c in 0..3 {
                        bg_sum[c] += px[c];
                    }
                    bg_n += 1.0;
                } else if fg_colors.is_empty() {
                    fg_colors.push(px);
                }
            }
        }
        let bg = bg_sum.map(|s| s / bg_n);
        for y in 0..h {
            for x in 0..w {
                let px = ex.patch.pixel(y, x);
                let near_bg = color_distance(px, bg) <= 2.0 * TEXTURE_AMPLITUDE;
                if ex.mask.get(y, x) < 0.5 {
                    assert!(near_bg);
                }
            }
        }
        let other = random_exemplar(64, 64, &mut rng(6)).unwrap();
        assert_ne!(ex.patch, other.patch);
    }

    #[test]
    fn translate_oracle_is_exact() {
        for (i, (dx, dy)) in [(3, 0), (-2, 4), (5, -5), (0, 1)].into_iter().enumerate() {
            let pair = make_pair(PairMode::Translate { dx, dy }, 64, 64, &mut rng(10 + i as u64)).unwrap();
            let oracle = pair.oracle.as_ref().unwrap();
            let warped = warp(&pair.source.mask, oracle).unwrap();
            assert_eq!(warped, pair.target);
            assert_eq!(loss_shape(&pair.target, &warped).unwrap(), 0.0);
            assert_eq!(
                pair.target.count_foreground(0.5),
                pair.source.mask.count_foreground(0.5)
            );
        }
        let pair = make_pair(PairMode::Translate { dx: 0, dy: 0 }, 32, 32, &mut rng(20)).unwrap();
        assert_eq!(pair.oracle.unwrap(), identity_field(32, 32));
    }

    #[test]
    fn other_modes_have_no_oracle() {
        let pair = make_pair(PairMode::Arbitrary, 64, 64, &mut rng(21)).unwrap();
        assert!(!pair.has_oracle());
        let pair = make_pair(PairMode::ScaleLegs { extra_deg: 10.0 }, 64, 64, &mut rng(22)).unwrap();
        assert!(!pair.has_oracle());
        // Wider stance: the bottom row of the target is at least as wide.
        let width_at = |m: &Mask| {
            let (_, bottom) = m.vertical_extent(0.5).unwrap();
            (0..m.width()).filter(|&x| m.get(bottom, x) >= 0.5).count()
        };
        assert!(width_at(&pair.target) >= width_at(&pair.source.mask));
    }

    #[test]
    fn planted_boxes_follow_the_line() {
        let params = SceneParams::small_street(240, 320);
        let model = &params.placement;
        let (scene, boxes) = gen_scene(&params, &mut rng(30)).unwrap();
        assert_eq!(scene.dims(), (240, 320));
        for b in &boxes {
            assert!((b.height - (model.k * b.y_bottom() + model.b)).abs() < 1e-9);
        }
        let (again, boxes2) = gen_scene(&params, &mut rng(30)).unwrap();
        assert_eq!(again, scene);
        assert_eq!(boxes, boxes2);

        let mut all = boxes;
        let mut r = rng(31);
        while all.len() < 20 {
            all.extend(gen_scene(&params, &mut r).unwrap().1);
        }
        let fitted = fit(&all, 240, 320).unwrap();
        assert!((fitted.k - model.k).abs() < 1e-9);
        assert!((fitted.b - model.b).abs() < 1e-7);
    }
}

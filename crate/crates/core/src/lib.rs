//! Shape-guided deformation, environment-aware blending and scene placement
//! primitives for synthesising pedestrian instances.

pub mod blend;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod placement;
pub mod solver;
pub mod synth;
pub mod warp;

pub use blend::{compose, paste_into_scene, squash_alpha, BlendMap};
pub use error::{Error, Result};
pub use geometry::{constrain_shape, mask_iou, mask_l1, rasterize, row_spans, GammaProfile, RowSpan};
pub use grid::{Grid, Mask, Patch, Raster, SceneImage};
pub use placement::{fit, sample_count, sample_placement, BoundingBox, PlacementModel};
pub use solver::{deform, solve_field, Deformation, LossParts, SolveDiagnostics, SolverConfig};
pub use warp::{identity_field, warp, warp_grid, warp_vjp, WarpField};

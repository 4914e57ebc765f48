//! Rasterization of action-unit anchors into normalized heatmaps, and the
//! bilinear map resizing used for alignment and evaluation.
//!
//! A heatmap holds one isotropic Gaussian blob per anchor; blobs combine by
//! pixelwise maximum so overlapping units keep per-unit peak semantics and
//! never exceed 1. Everything below the blobs sits at a small constant
//! background floor, and the whole map is renormalized so its global maximum
//! is exactly 1 whenever at least one anchor exists (a blob peaks below 1
//! when its anchor falls between pixel centers).

use alloc::vec::Vec;
use core::fmt;

use crate::codebook::Codebook;
use crate::landmarks::{self, LandmarkSet};
use crate::map::Map2;

/// Tunables for heatmap construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuMapParams {
    /// Background level, in `[0, 1)`.
    pub floor: f64,
    /// Global multiplier on every blob radius.
    pub radius_scale: f64,
}

impl Default for AuMapParams {
    fn default() -> Self {
        Self { floor: 0.02, radius_scale: 1.0 }
    }
}

/// A rasterized action-unit heatmap.
///
/// Invariants (enforced by construction): every value is in `[0, 1]` and at
/// least `floor`; the maximum is exactly 1 when the generating anchor set is
/// nonempty, and the map is the constant `floor` when it is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AuHeatmap {
    map: Map2,
    floor: f64,
}

impl AuHeatmap {
    pub fn map(&self) -> &Map2 {
        &self.map
    }

    pub fn into_map(self) -> Map2 {
        self.map
    }

    pub fn values(&self) -> &[f64] {
        self.map.data()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.map.shape()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Reassembles a heatmap from stored values (e.g. a disk cache) without
    /// re-rasterizing. The caller vouches that `map` came from a rasterizer
    /// with this `floor`.
    pub fn from_parts(map: Map2, floor: f64) -> AuHeatmap {
        AuHeatmap { map, floor }
    }
}

/// Rasterizes `(center, radius)` anchors into a heatmap.
///
/// Each anchor contributes `exp(-dist^2 / (2 radius^2))`; blobs combine by
/// pixelwise max, are clamped below by `floor`, and the map is divided by
/// its global max when `anchors` is nonempty. Pixel `(y, x)` samples the
/// blob at integer coordinates, so an anchor on the pixel grid attains
/// exactly 1 before renormalization.
pub fn rasterize(
    anchors: &[([f64; 2], f64)],
    size: (usize, usize),
    floor: f64,
) -> Result<AuHeatmap, MapError> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(MapError::EmptySize);
    }
    if !(0.0..1.0).contains(&floor) {
        return Err(MapError::BadFloor { floor });
    }
    for &(_, r) in anchors {
        if !(r > 0.0 && r.is_finite()) {
            return Err(MapError::NonpositiveRadius { radius: r });
        }
    }

    let mut map = Map2::filled(h, w, floor);
    if !anchors.is_empty() {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0.0f64;
                for &([ax, ay], r) in anchors {
                    let dx = x as f64 - ax;
                    let dy = y as f64 - ay;
                    let g = crate::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
                    if g > best {
                        best = g;
                    }
                }
                map.set(y, x, best.max(floor));
            }
        }
        let gmax = map.max();
        if gmax > 0.0 {
            map.map_inplace(|v| v / gmax);
        }
    }
    Ok(AuHeatmap { map, floor })
}

/// Builds the heatmap for one expression from its codebook entry.
///
/// Landmarks are rescaled from their source-image frame to `size` first;
/// radii are `radius_factor * interocular_distance * params.radius_scale`,
/// measured in the rescaled frame. An expression with no action units (such
/// as `Neutral`) yields the constant-floor map without touching geometry.
pub fn build_au_map(
    expression: crate::codebook::Expression,
    lm: &LandmarkSet,
    codebook: &Codebook,
    size: (usize, usize),
    params: AuMapParams,
) -> Result<AuHeatmap, AuMapError> {
    let specs = codebook.lookup(expression);
    if specs.is_empty() {
        return Ok(rasterize(&[], size, params.floor)?);
    }
    let lm = lm.scaled_to(size)?;
    let iod = landmarks::interocular_distance(&lm)?;
    let mut anchors = Vec::new();
    for spec in specs {
        let radius = spec.radius_factor * iod * params.radius_scale;
        for formula in &spec.anchors {
            anchors.push((landmarks::anchor_point(formula, &lm)?, radius));
        }
    }
    Ok(rasterize(&anchors, size, params.floor)?)
}

/// Bilinear resize with corner-aligned sampling.
///
/// Output pixel `(i, j)` samples the source at
/// `(i * (h-1)/(h'-1), j * (w-1)/(w'-1))`; a 1-wide target axis samples at
/// coordinate 0. The result is clamped to the source's `[min, max]` range,
/// which also makes constant maps resize exactly. An identity target size
/// returns the map unchanged.
pub fn resize_map(map: &Map2, target: (usize, usize)) -> Result<Map2, MapError> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(MapError::EmptyTarget);
    }
    let (sh, sw) = map.shape();
    if (th, tw) == (sh, sw) {
        return Ok(map.clone());
    }

    let step = |src: usize, dst: usize| -> f64 {
        if dst > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let sy = step(sh, th);
    let sx = step(sw, tw);
    let (lo, hi) = (map.min(), map.max());

    let mut out = Map2::zeros(th, tw);
    for i in 0..th {
        let y = i as f64 * sy;
        let y0 = y as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = y - y0 as f64;
        for j in 0..tw {
            let x = j as f64 * sx;
            let x0 = x as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = x - x0 as f64;
            let v = map.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + map.get(y0, x1) * (1.0 - fy) * fx
                + map.get(y1, x0) * fy * (1.0 - fx)
                + map.get(y1, x1) * fy * fx;
            out.set(i, j, v.clamp(lo, hi));
        }
    }
    Ok(out)
}

/// Errors from rasterization and resizing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapError {
    /// Requested heatmap size had a zero dimension.
    EmptySize,
    /// An anchor radius was zero, negative, or non-finite.
    NonpositiveRadius { radius: f64 },
    /// Background floor outside `[0, 1)`.
    BadFloor { floor: f64 },
    /// Requested resize target had a zero dimension.
    EmptyTarget,
}

impl fmt::Display for MapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapError::EmptySize => write!(f, "heatmap size components must be positive"),
            MapError::NonpositiveRadius { radius } => {
                write!(f, "blob radius must be positive and finite, got {radius}")
            }
            MapError::BadFloor { floor } => {
                write!(f, "background floor must be in [0, 1), got {floor}")
            }
            MapError::EmptyTarget => write!(f, "resize target components must be positive"),
        }
    }
}

impl core::error::Error for MapError {}

/// Errors from [`build_au_map`]: geometry problems or rasterizer problems.
#[derive(Debug, Clone, PartialEq)]
pub enum AuMapError {
    Landmark(landmarks::LandmarkError),
    Map(MapError),
}

impl fmt::Display for AuMapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuMapError::Landmark(e) => write!(f, "{e}"),
            AuMapError::Map(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for AuMapError {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            AuMapError::Landmark(e) => Some(e),
            AuMapError::Map(e) => Some(e),
        }
    }
}

impl From<landmarks::LandmarkError> for AuMapError {
    fn from(e: landmarks::LandmarkError) -> Self {
        AuMapError::Landmark(e)
    }
}

impl From<MapError> for AuMapError {
    fn from(e: MapError) -> Self {
        AuMapError::Map(e)
    }
}

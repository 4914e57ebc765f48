//! 68-point facial landmark sets and the geometry built on them.
//!
//! Landmarks follow the standard 68-point annotation scheme, 0-based:
//! jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67. Sides are
//! viewer-relative, so the subject's right eye (36-41) sits on the image
//! left. Coordinates are `(x, y)` pixels of the source image; `y` grows
//! downward.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::codebook::Anchor;

/// Number of points in the landmark scheme.
pub const NUM_LANDMARKS: usize = 68;

/// Indices of the subject's right eye (image left).
pub const RIGHT_EYE: core::ops::Range<usize> = 36..42;

/// Indices of the subject's left eye (image right).
pub const LEFT_EYE: core::ops::Range<usize> = 42..48;

/// Index permutation under a horizontal (left-right) image flip.
///
/// `MIRROR_INDEX[i]` is the landmark that takes index `i`'s role in the
/// mirrored face. The table is an involution.
pub const MIRROR_INDEX: [usize; NUM_LANDMARKS] = [
    // jaw 0-16 reverses end to end
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
    // brows 17-26 swap sides
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17,
    // nose bridge 27-30 is on the midline
    27, 28, 29, 30,
    // nostrils 31-35 swap around 33
    35, 34, 33, 32, 31,
    // eyes 36-47 swap, preserving each eye's corner/lid order
    45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40,
    // outer mouth 48-59
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55,
    // inner mouth 60-67
    64, 63, 62, 61, 60, 67, 66, 65,
];

/// One face's landmarks plus the pixel size of the image they live in.
///
/// Points may fall slightly outside the image bounds; detector noise at the
/// frame edge is tolerated everywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    image_size: (usize, usize),
}

impl LandmarkSet {
    /// Wraps 68 `(x, y)` points with their `(h, w)` image size.
    pub fn new(points: Vec<[f64; 2]>, image_size: (usize, usize)) -> Result<Self, LandmarkError> {
        if points.len() != NUM_LANDMARKS {
            return Err(LandmarkError::WrongCount { found: points.len() });
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(LandmarkError::EmptyImageSize);
        }
        Ok(Self { points, image_size })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    /// `(h, w)` of the image frame the coordinates refer to.
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    /// Parses the landmark text format: a header line `h w`, then 68 lines
    /// of `x y`.
    pub fn parse(text: &str) -> Result<Self, LandmarkError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| LandmarkError::Parse {
            line: 1,
            message: "empty file".to_string(),
        })?;
        let mut it = header.split_whitespace();
        let h: usize = parse_field(it.next(), 1, "image height")?;
        let w: usize = parse_field(it.next(), 1, "image width")?;
        if it.next().is_some() {
            return Err(LandmarkError::Parse {
                line: 1,
                message: "header must be exactly `h w`".to_string(),
            });
        }

        let rows: Vec<&str> = lines.collect();
        if rows.len() != NUM_LANDMARKS {
            return Err(LandmarkError::WrongCount { found: rows.len() });
        }
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for (i, row) in rows.iter().enumerate() {
            let line_no = i + 2;
            let mut it = row.split_whitespace();
            let x: f64 = parse_field(it.next(), line_no, "x coordinate")?;
            let y: f64 = parse_field(it.next(), line_no, "y coordinate")?;
            if it.next().is_some() {
                return Err(LandmarkError::Parse {
                    line: line_no,
                    message: "landmark rows must be exactly `x y`".to_string(),
                });
            }
            if !(x.is_finite() && y.is_finite()) {
                return Err(LandmarkError::Parse {
                    line: line_no,
                    message: "coordinates must be finite".to_string(),
                });
            }
            points.push([x, y]);
        }
        LandmarkSet::new(points, (h, w))
    }

    /// Serializes back to the text format accepted by [`LandmarkSet::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.image_size.0, self.image_size.1);
        for p in &self.points {
            out.push_str(&format!("{} {}\n", p[0], p[1]));
        }
        out
    }

    /// Rescales coordinates from the current image size to `target` `(h, w)`
    /// by the per-axis size ratio.
    pub fn scaled_to(&self, target: (usize, usize)) -> Result<LandmarkSet, LandmarkError> {
        if target.0 == 0 || target.1 == 0 {
            return Err(LandmarkError::EmptyImageSize);
        }
        let sy = target.0 as f64 / self.image_size.0 as f64;
        let sx = target.1 as f64 / self.image_size.1 as f64;
        let points = self.points.iter().map(|p| [p[0] * sx, p[1] * sy]).collect();
        Ok(LandmarkSet { points, image_size: target })
    }

    /// Shifts every point by `(dx, dy)`, keeping the frame.
    pub fn translated(&self, dx: f64, dy: f64) -> LandmarkSet {
        let points = self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        LandmarkSet { points, image_size: self.image_size }
    }

    /// Re-expresses the points inside a crop window whose top-left corner is
    /// `(ox, oy)` in the current frame and whose size is `crop` `(h, w)`.
    pub fn cropped(&self, ox: f64, oy: f64, crop: (usize, usize)) -> Result<LandmarkSet, LandmarkError> {
        if crop.0 == 0 || crop.1 == 0 {
            return Err(LandmarkError::EmptyImageSize);
        }
        let points = self.points.iter().map(|p| [p[0] - ox, p[1] - oy]).collect();
        Ok(LandmarkSet { points, image_size: crop })
    }

    /// Horizontal flip: `x -> (w - 1) - x` (matching an image pixel flip)
    /// plus the [`MIRROR_INDEX`] permutation so semantic roles stay put.
    pub fn mirrored_horizontal(&self) -> LandmarkSet {
        let w = self.image_size.1 as f64;
        let mut points = self.points.clone();
        for (i, &src) in MIRROR_INDEX.iter().enumerate() {
            let p = self.points[src];
            points[i] = [(w - 1.0) - p[0], p[1]];
        }
        LandmarkSet { points, image_size: self.image_size }
    }
}

fn parse_field<T: core::str::FromStr>(
    field: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, LandmarkError> {
    let raw = field.ok_or_else(|| LandmarkError::Parse {
        line,
        message: format!("missing {what}"),
    })?;
    raw.parse().map_err(|_| LandmarkError::Parse {
        line,
        message: format!("bad {what} {raw:?}"),
    })
}

/// Resolves an anchor formula to a pixel point: the weight-normalized
/// combination `sum(w_i * p_i) / sum(w_i)`.
pub fn anchor_point(anchor: &Anchor, lm: &LandmarkSet) -> Result<[f64; 2], LandmarkError> {
    let mut wsum = 0.0;
    let mut x = 0.0;
    let mut y = 0.0;
    for &(idx, w) in &anchor.weights {
        if idx >= NUM_LANDMARKS {
            return Err(LandmarkError::IndexOutOfRange { index: idx });
        }
        let p = lm.point(idx);
        x += w * p[0];
        y += w * p[1];
        wsum += w;
    }
    if !(wsum.abs() > 1e-12 && wsum.is_finite()) {
        return Err(LandmarkError::ZeroWeightSum);
    }
    Ok([x / wsum, y / wsum])
}

/// Euclidean distance between the two eye centroids (left eye = mean of
/// landmarks 42-47, right eye = mean of 36-41), in pixels.
pub fn interocular_distance(lm: &LandmarkSet) -> Result<f64, LandmarkError> {
    let centroid = |range: core::ops::Range<usize>| {
        let n = range.len() as f64;
        let mut c = [0.0, 0.0];
        for i in range {
            c[0] += lm.point(i)[0];
            c[1] += lm.point(i)[1];
        }
        [c[0] / n, c[1] / n]
    };
    let l = centroid(LEFT_EYE);
    let r = centroid(RIGHT_EYE);
    let (dx, dy) = (l[0] - r[0], l[1] - r[1]);
    let d = crate::sqrt(dx * dx + dy * dy);
    if d < 1.0 {
        return Err(LandmarkError::DegenerateGeometry { distance: d });
    }
    Ok(d)
}

/// Errors from landmark parsing and geometry.
#[derive(Debug, Clone, PartialEq)]
pub enum LandmarkError {
    /// Not exactly 68 points.
    WrongCount { found: usize },
    /// Malformed text at the given 1-based line.
    Parse { line: usize, message: String },
    /// An image or crop dimension was zero.
    EmptyImageSize,
    /// An anchor referenced a landmark index >= 68.
    IndexOutOfRange { index: usize },
    /// Anchor weights summed to zero; the position is undefined.
    ZeroWeightSum,
    /// Eye centroids closer than one pixel; radii would collapse.
    DegenerateGeometry { distance: f64 },
}

impl fmt::Display for LandmarkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LandmarkError::WrongCount { found } => {
                write!(f, "expected {NUM_LANDMARKS} landmarks, found {found}")
            }
            LandmarkError::Parse { line, message } => {
                write!(f, "landmark parse error at line {line}: {message}")
            }
            LandmarkError::EmptyImageSize => write!(f, "image size components must be positive"),
            LandmarkError::IndexOutOfRange { index } => {
                write!(f, "landmark index {index} out of range (must be < {NUM_LANDMARKS})")
            }
            LandmarkError::ZeroWeightSum => write!(f, "anchor weights sum to zero"),
            LandmarkError::DegenerateGeometry { distance } => {
                write!(f, "degenerate landmark geometry: interocular distance {distance} < 1 pixel")
            }
        }
    }
}

impl core::error::Error for LandmarkError {}

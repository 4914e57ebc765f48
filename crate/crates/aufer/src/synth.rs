//! Synthetic toy-face corpus generator.
//!
//! Each image renders the same neutral face template (jittered landmarks,
//! face ellipse, dark feature polylines) and then adds class evidence:
//! an oriented, class-colored stripe texture painted exactly inside the
//! 0.5-level set of that class's action-unit heatmap. Background clutter
//! shapes land strictly outside every expression's heatmap regions, so
//! nothing off-region carries class information. Neutral images get
//! clutter but no stripes. The whole corpus is a pure function of the seed.

use std::path::Path;

use aufer_core::aumap::{build_au_map, AuMapParams};
use aufer_core::codebook::{Codebook, Expression};
use aufer_core::landmarks::{LandmarkSet, NUM_LANDMARKS};
use aufer_core::map::Map2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ToolkitError;
use crate::formats::{save_landmarks, save_manifest, DatasetManifest, ManifestEntry, Split};
use crate::img::ImageBuf;

/// Canonical 68-point frontal template in unit coordinates, iBUG indexing,
/// viewer-relative sides (landmark 36 is the viewer-left eye's outer
/// corner). Mirror-symmetric about x = 0.5.
pub fn template_unit() -> [[f64; 2]; NUM_LANDMARKS] {
    let mut p = [[0.0f64; 2]; NUM_LANDMARKS];
    // Jaw 0..=16: half ellipse from viewer-left ear over the chin.
    for i in 0..=16 {
        let t = core::f64::consts::PI * i as f64 / 16.0;
        p[i] = [0.5 - 0.36 * t.cos(), 0.5 + 0.44 * t.sin()];
    }
    // Brows 17..=21 (viewer-left) and 22..=26 (viewer-right), gentle arch.
    for j in 0..5 {
        let arch = 0.02 * (core::f64::consts::PI * j as f64 / 4.0).sin();
        p[17 + j] = [0.20 + 0.055 * j as f64, 0.36 - arch];
        p[22 + j] = [0.58 + 0.055 * j as f64, 0.36 - 0.02 * (core::f64::consts::PI * (4 - j) as f64 / 4.0).sin()];
    }
    // Nose bridge 27..=30 and nostril line 31..=35.
    for j in 0..4 {
        p[27 + j] = [0.5, 0.40 + 0.0617 * j as f64];
    }
    let nostril_y = [0.645, 0.652, 0.655, 0.652, 0.645];
    for j in 0..5 {
        p[31 + j] = [0.42 + 0.04 * j as f64, nostril_y[j]];
    }
    // Eyes: hexagons. Viewer-left eye 36..=41, viewer-right eye 42..=47.
    let eye = |cx: f64, cy: f64, out: &mut [[f64; 2]]| {
        let (a, b) = (0.055, 0.022);
        out[0] = [cx - a, cy];
        out[1] = [cx - a / 2.0, cy - b];
        out[2] = [cx + a / 2.0, cy - b];
        out[3] = [cx + a, cy];
        out[4] = [cx + a / 2.0, cy + b];
        out[5] = [cx - a / 2.0, cy + b];
    };
    eye(0.32, 0.44, &mut p[36..42]);
    eye(0.68, 0.44, &mut p[42..48]);
    // Outer mouth 48..=59: twelve points around an ellipse, 48 at the
    // viewer-left corner, then over the top lip to 54 and back under.
    for j in 0..12 {
        let theta = core::f64::consts::PI - core::f64::consts::PI * j as f64 / 6.0;
        p[48 + j] = [0.5 + 0.13 * theta.cos(), 0.74 - 0.055 * theta.sin()];
    }
    // Inner mouth 60..=67: eight points, same orientation convention.
    for j in 0..8 {
        let theta = core::f64::consts::PI - core::f64::consts::PI * j as f64 / 4.0;
        p[60 + j] = [0.5 + 0.085 * theta.cos(), 0.74 - 0.025 * theta.sin()];
    }
    p
}

/// Stripe color per basic expression (Neutral renders no stripes).
fn class_color(e: Expression) -> [f64; 3] {
    match e {
        Expression::Anger => [0.90, 0.15, 0.15],
        Expression::Disgust => [0.15, 0.80, 0.20],
        Expression::Fear => [0.25, 0.30, 0.95],
        Expression::Happiness => [0.95, 0.80, 0.10],
        Expression::Sadness => [0.15, 0.80, 0.90],
        Expression::Surprise => [0.90, 0.25, 0.90],
        Expression::Neutral => [0.0, 0.0, 0.0],
    }
}

/// Clutter palette, deliberately distinct from every class color.
const CLUTTER_COLORS: [[f64; 3]; 8] = [
    [0.55, 0.35, 0.20],
    [0.98, 0.98, 0.98],
    [0.05, 0.05, 0.05],
    [0.60, 0.60, 0.65],
    [0.45, 0.25, 0.55],
    [0.95, 0.55, 0.30],
    [0.30, 0.50, 0.35],
    [0.75, 0.70, 0.55],
];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
}

#[derive(Debug, Clone)]
struct SampleSpec {
    class: Expression,
    lm: LandmarkSet,
    /// Jittered face-ellipse geometry in pixels: center and radii.
    face: (f64, f64, f64, f64),
    clutter: Vec<(Shape, [f64; 3])>,
    stripe_phase: f64,
    noise_seed: u64,
}

/// Draws every random decision for one sample up front so rendering is a
/// pure function of the spec (tests re-render with the texture disabled to
/// isolate signal pixels).
fn draw_spec(class: Expression, size: usize, rng: &mut ChaCha8Rng) -> SampleSpec {
    let s = size as f64;
    let scale = 0.92 + 0.16 * rng.random::<f64>();
    let tx = (rng.random::<f64>() - 0.5) * 0.08;
    let ty = (rng.random::<f64>() - 0.5) * 0.08;
    let place = |u: [f64; 2], jx: f64, jy: f64| -> [f64; 2] {
        let x = ((u[0] - 0.5) * scale + 0.5 + tx) * s + jx;
        let y = ((u[1] - 0.5) * scale + 0.5 + ty) * s + jy;
        [x.clamp(1.0, s - 2.0), y.clamp(1.0, s - 2.0)]
    };
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    for u in template_unit() {
        let jx = rng.random::<f64>() - 0.5;
        let jy = rng.random::<f64>() - 0.5;
        pts.push(place(u, jx, jy));
    }
    let lm = LandmarkSet::new(pts, (size, size)).expect("template stays in frame");

    let face_c = place([0.5, 0.52], 0.0, 0.0);
    let face = (face_c[0], face_c[1], 0.385 * scale * s, 0.46 * scale * s);

    let n_clutter = 8 + (rng.random::<u32>() % 9) as usize;
    let mut clutter = Vec::with_capacity(n_clutter);
    for _ in 0..n_clutter {
        let cx = rng.random::<f64>() * s;
        let cy = rng.random::<f64>() * s;
        let r = 2.5 + rng.random::<f64>() * 6.5;
        let kind = rng.random::<u32>() % 2;
        let angle = rng.random::<f64>() * core::f64::consts::PI;
        let color = CLUTTER_COLORS[(rng.random::<u32>() % 8) as usize];
        let shape = if kind == 0 {
            Shape::Circle { cx, cy, r }
        } else {
            Shape::Rect { cx, cy, hw: r, hh: r * (0.3 + 0.5 * rng.random::<f64>()), angle }
        };
        clutter.push((shape, color));
    }
    let stripe_phase = rng.random::<f64>() * 10.0;
    let noise_seed = rng.random::<u64>();
    SampleSpec { class, lm, face, clutter, stripe_phase, noise_seed }
}

/// Stripe orientation per basic-expression index.
fn stripe_angle(class: Expression) -> f64 {
    (class.index() as f64) * core::f64::consts::PI / 6.0
}

fn stamp(img: &mut ImageBuf, x: f64, y: f64, color: [f64; 3]) {
    let (h, w) = img.shape();
    let (xi, yi) = (x.round() as isize, y.round() as isize);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (px, py) = (xi + dx, yi + dy);
            if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                continue;
            }
            let d2 = (px as f64 - x) * (px as f64 - x) + (py as f64 - y) * (py as f64 - y);
            if d2 <= 0.9 {
                img.set_rgb(py as usize, px as usize, color);
            }
        }
    }
}

fn polyline(img: &mut ImageBuf, pts: &[[f64; 2]], closed: bool, color: [f64; 3]) {
    let n = pts.len();
    let last = if closed { n } else { n - 1 };
    for i in 0..last {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let steps = (len / 0.5).ceil().max(1.0) as usize;
        for t in 0..=steps {
            let f = t as f64 / steps as f64;
            stamp(img, a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, color);
        }
    }
}

/// Heatmap union over the six basic expressions; clutter stays strictly
/// below its 0.5-level set so no off-region pixel carries class signal.
fn region_union(lm: &LandmarkSet, cb: &Codebook, size: usize, params: AuMapParams) -> Result<Map2, ToolkitError> {
    let mut union = Map2::zeros(size, size);
    for expr in Expression::BASIC {
        let hm = build_au_map(expr, lm, cb, (size, size), params)
            .map_err(|e| ToolkitError::AuMap { id: "synthetic template".into(), source: e })?;
        for (u, &v) in union.data_mut().iter_mut().zip(hm.values()) {
            if v > *u {
                *u = v;
            }
        }
    }
    Ok(union)
}

/// Renders one sample. With `texture` false the class stripes are omitted;
/// everything else (template, clutter, noise) is identical, which lets
/// tests isolate the signal pixels by diffing the two renders.
fn render(spec: &SampleSpec, cb: &Codebook, params: AuMapParams, texture: bool) -> Result<ImageBuf, ToolkitError> {
    let (size, _) = spec.lm.image_size();
    let s = size as f64;
    let mut img = ImageBuf::filled(size, size, [0.85, 0.85, 0.85]);

    // Face ellipse.
    let (fcx, fcy, frx, fry) = spec.face;
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 - fcx) / frx;
            let dy = (y as f64 - fcy) / fry;
            if dx * dx + dy * dy <= 1.0 {
                img.set_rgb(y, x, [0.75, 0.75, 0.75]);
            }
        }
    }

    // Clutter, clipped to the complement of every expression's regions.
    let union = region_union(&spec.lm, cb, size, params)?;
    for &(shape, color) in &spec.clutter {
        for y in 0..size {
            for x in 0..size {
                if union.get(y, x) >= 0.5 {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                let inside = match shape {
                    Shape::Circle { cx, cy, r } => {
                        (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r
                    }
                    Shape::Rect { cx, cy, hw, hh, angle } => {
                        let (c, sn) = (angle.cos(), angle.sin());
                        let rx = (px - cx) * c + (py - cy) * sn;
                        let ry = -(px - cx) * sn + (py - cy) * c;
                        rx.abs() <= hw && ry.abs() <= hh
                    }
                };
                if inside {
                    img.set_rgb(y, x, color);
                }
            }
        }
    }

    // Neutral feature lines, common to all classes.
    let p = spec.lm.points();
    let line = [0.35, 0.35, 0.35];
    polyline(&mut img, &p[0..17], false, line);
    polyline(&mut img, &p[17..22], false, line);
    polyline(&mut img, &p[22..27], false, line);
    polyline(&mut img, &p[27..31], false, line);
    polyline(&mut img, &p[31..36], false, line);
    polyline(&mut img, &p[36..42], true, line);
    polyline(&mut img, &p[42..48], true, line);
    polyline(&mut img, &p[48..60], true, line);
    polyline(&mut img, &p[60..68], true, line);

    // Class stripes, painted exactly inside the class heatmap's 0.5-level
    // set. Neutral has an empty level set (constant floor below 0.5).
    if texture && spec.class != Expression::Neutral {
        let hm = build_au_map(spec.class, &spec.lm, cb, (size, size), params)
            .map_err(|e| ToolkitError::AuMap { id: "synthetic template".into(), source: e })?;
        let phi = stripe_angle(spec.class);
        let (cphi, sphi) = (phi.cos(), phi.sin());
        let period = 4.0 * s / 96.0;
        let bright = class_color(spec.class);
        let dark = [0.12, 0.12, 0.12];
        for y in 0..size {
            for x in 0..size {
                if hm.map().get(y, x) < 0.5 {
                    continue;
                }
                let u = (x as f64 * cphi + y as f64 * sphi) / period + spec.stripe_phase;
                let band = (core::f64::consts::TAU * u).sin() >= 0.0;
                img.set_rgb(y, x, if band { bright } else { dark });
            }
        }
    }

    // Low-amplitude pixel noise so no patch is exactly constant.
    let mut nrng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    for v in img.data_mut() {
        *v = (*v + (nrng.random::<f64>() - 0.5) * 0.02).clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Corpus counts reported by [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthReport {
    pub images: usize,
    pub landmark_files: usize,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Writes the synthetic corpus: `images/`, `landmarks/`, and the two split
/// manifests. 80% of each class trains, the rest tests. Deterministic:
/// the same seed yields a byte-identical corpus.
pub fn generate(
    root: &Path,
    seed: u64,
    n_per_class: usize,
    size: usize,
    cb: &Codebook,
    params: AuMapParams,
) -> Result<SynthReport, ToolkitError> {
    for sub in ["images", "landmarks"] {
        std::fs::create_dir_all(root.join(sub))
            .map_err(|e| ToolkitError::io(root.join(sub), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = if n_per_class >= 2 {
        ((n_per_class * 4 + 2) / 5).clamp(1, n_per_class - 1)
    } else {
        n_per_class
    };
    let class_names: Vec<String> = Expression::ALL.iter().map(|e| e.label().to_string()).collect();
    let mut train_entries = Vec::new();
    let mut test_entries = Vec::new();
    let mut images = 0;
    let mut landmark_files = 0;

    for expr in Expression::ALL {
        for idx in 0..n_per_class {
            let spec = draw_spec(expr, size, &mut rng);
            let img = render(&spec, cb, params, true)?;
            let stem = format!("{}_{idx:03}", expr.label());
            let image_rel = format!("images/{stem}.png");
            let lm_rel = format!("landmarks/{stem}.txt");
            img.save_png(&root.join(&image_rel))?;
            save_landmarks(&spec.lm, &root.join(&lm_rel))?;
            images += 1;
            landmark_files += 1;
            let entry = ManifestEntry {
                id: format!("images/{stem}"),
                image: image_rel.into(),
                label: expr.index(),
                landmarks: lm_rel.into(),
            };
            if idx < n_train {
                train_entries.push(entry);
            } else {
                test_entries.push(entry);
            }
        }
    }
    train_entries.sort_by(|a, b| a.id.cmp(&b.id));
    test_entries.sort_by(|a, b| a.id.cmp(&b.id));
    let train_rows = train_entries.len();
    let test_rows = test_entries.len();
    save_manifest(&DatasetManifest {
        root: root.to_path_buf(),
        split: Split::Train,
        class_names: class_names.clone(),
        entries: train_entries,
    })?;
    save_manifest(&DatasetManifest {
        root: root.to_path_buf(),
        split: Split::Test,
        class_names,
        entries: test_entries,
    })?;
    Ok(SynthReport { images, landmark_files, train_rows, test_rows })
}

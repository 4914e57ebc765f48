//! Figure rendering for evaluation reports.
//!
//! Emits, per run: (a) a per-class average attention grid, (b) a per-class
//! average CAM grid, (c) one 4-panel image per retained sample in the
//! order input / AU map / CAM / attention, and (d) confusion and cosine
//! heat-tables. With nothing retained, (c) is skipped with a logged
//! notice. All figures are plain PNGs with an embedded 3x5 pixel font, so
//! rendering needs no external assets.

use std::path::{Path, PathBuf};

use crate::error::ToolkitError;
use crate::eval::{EvalReport, ImageData, MapData};
use crate::img::ImageBuf;

pub const FIGURE_DIR: &str = "figures";
const PANEL: usize = 96;
const PAD: usize = 3;
const BG: [f64; 3] = [0.97, 0.97, 0.97];
const INK: [f64; 3] = [0.1, 0.1, 0.1];

/// Perceptual dark-to-bright colormap (viridis-style anchor ramp).
pub fn colormap(v: f64) -> [f64; 3] {
    const ANCHORS: [[f64; 3]; 7] = [
        [0.267, 0.005, 0.329],
        [0.283, 0.141, 0.458],
        [0.254, 0.265, 0.530],
        [0.164, 0.471, 0.558],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let v = v.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (v.floor() as usize).min(ANCHORS.len() - 2);
    let f = v - i as f64;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b011, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b010, 0b001],
        'R' => [0b110, 0b101, 0b110, 0b110, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b011],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b011, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        '/' => [0b001, 0b001, 0b010, 0b100, 0b100],
        '>' => [0b100, 0b010, 0b001, 0b010, 0b100],
        ' ' => [0; 5],
        _ => [0b111, 0b101, 0b101, 0b101, 0b111],
    }
}

/// Stamps `text` at `(x, y)` (top-left) with the pixel font. Returns the
/// x coordinate after the last glyph.
pub fn draw_text(img: &mut ImageBuf, x: usize, y: usize, scale: usize, text: &str, color: [f64; 3]) -> usize {
    let (h, w) = img.shape();
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (gy, row) in g.iter().enumerate() {
            for gx in 0..3 {
                if row & (0b100 >> gx) == 0 {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        let px = cx + gx * scale + sx;
                        let py = y + gy * scale + sy;
                        if px < w && py < h {
                            img.set_rgb(py, px, color);
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
    cx
}

pub fn text_width(text: &str, scale: usize) -> usize {
    text.chars().count() * 4 * scale
}

fn map_panel(m: &MapData) -> ImageBuf {
    let mut img = ImageBuf::zeros(m.h.max(1), m.w.max(1));
    for y in 0..m.h {
        for x in 0..m.w {
            img.set_rgb(y, x, colormap(m.data[y * m.w + x]));
        }
    }
    img.resized((PANEL, PANEL))
}

fn image_panel(im: &ImageData) -> ImageBuf {
    let mut img = ImageBuf::zeros(im.h.max(1), im.w.max(1));
    let plane = im.h * im.w;
    for y in 0..im.h {
        for x in 0..im.w {
            let i = y * im.w + x;
            img.set_rgb(y, x, [im.planes[i], im.planes[plane + i], im.planes[2 * plane + i]]);
        }
    }
    img.resized((PANEL, PANEL))
}

fn blit(dst: &mut ImageBuf, src: &ImageBuf, oy: usize, ox: usize) {
    let (sh, sw) = src.shape();
    for c in 0..3 {
        for y in 0..sh {
            for x in 0..sw {
                dst.set(c, oy + y, ox + x, src.get(c, y, x));
            }
        }
    }
}

/// One row of equally sized panels with a caption above each.
fn captioned_row(panels: &[(String, ImageBuf)]) -> ImageBuf {
    let header = 10;
    let n = panels.len().max(1);
    let w = n * (PANEL + PAD) + PAD;
    let h = header + PANEL + 2 * PAD;
    let mut img = ImageBuf::filled(h, w, BG);
    for (i, (caption, panel)) in panels.iter().enumerate() {
        let x = PAD + i * (PANEL + PAD);
        let label = truncate_to(caption, PANEL / 4);
        draw_text(&mut img, x, 2, 1, &label, INK);
        blit(&mut img, panel, header + PAD, x);
    }
    img
}

fn truncate_to(s: &str, chars: usize) -> String {
    s.chars().take(chars.max(1)).collect()
}

/// Class-column grid over per-class maps, used for figures (a) and (b).
fn class_grid(class_names: &[String], maps: &[MapData]) -> ImageBuf {
    let panels: Vec<(String, ImageBuf)> = class_names
        .iter()
        .zip(maps)
        .map(|(name, m)| (name.clone(), map_panel(m)))
        .collect();
    captioned_row(&panels)
}

/// Heat-table with row/column labels and a printed value per cell.
fn heat_table(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    color_values: &[Vec<f64>],
    texts: &[Vec<String>],
) -> ImageBuf {
    let cell_w = 44;
    let cell_h = 16;
    let gutter = 4 + row_labels.iter().map(|l| text_width(&truncate_to(l, 3), 1)).max().unwrap_or(0);
    let top = 12 + 10;
    let w = gutter + col_labels.len() * cell_w + PAD;
    let h = top + row_labels.len() * cell_h + PAD;
    let mut img = ImageBuf::filled(h, w, BG);
    draw_text(&mut img, PAD, 2, 1, title, INK);
    for (j, cl) in col_labels.iter().enumerate() {
        let label = truncate_to(cl, (cell_w - 2) / 4);
        draw_text(&mut img, gutter + j * cell_w + 2, 12, 1, &label, INK);
    }
    for (i, rl) in row_labels.iter().enumerate() {
        draw_text(&mut img, 2, top + i * cell_h + 5, 1, &truncate_to(rl, 3), INK);
        for j in 0..col_labels.len() {
            let v = color_values[i][j];
            let cell = colormap(v);
            for y in 0..cell_h - 1 {
                for x in 0..cell_w - 1 {
                    img.set_rgb(top + i * cell_h + y, gutter + j * cell_w + x, cell);
                }
            }
            let ink = if v > 0.55 { [0.05, 0.05, 0.05] } else { [0.95, 0.95, 0.95] };
            draw_text(&mut img, gutter + j * cell_w + 3, top + i * cell_h + 5, 1, &texts[i][j], ink);
        }
    }
    img
}

/// Renders and writes all figures for the report. Returns the written
/// paths. An empty retention set skips the per-sample panels with a
/// logged notice; the other figures are still produced.
pub fn emit_figures(report: &EvalReport, run_dir: &Path) -> Result<Vec<PathBuf>, ToolkitError> {
    let dir = run_dir.join(FIGURE_DIR);
    std::fs::create_dir_all(&dir)
        .map_err(|e| ToolkitError::RunDir { path: dir.clone(), message: e.to_string() })?;
    let mut written = Vec::new();

    let att = class_grid(&report.class_names, &report.per_class_attention);
    let att_path = dir.join("class_attention_grid.png");
    att.save_png(&att_path)?;
    written.push(att_path);

    let cam = class_grid(&report.class_names, &report.per_class_cam);
    let cam_path = dir.join("class_cam_grid.png");
    cam.save_png(&cam_path)?;
    written.push(cam_path);

    if report.retained.is_empty() {
        log::warn!("no per-sample maps retained; skipping the 4-panel sample figures");
    } else {
        let samples_dir = dir.join("samples");
        std::fs::create_dir_all(&samples_dir)
            .map_err(|e| ToolkitError::RunDir { path: samples_dir.clone(), message: e.to_string() })?;
        for (i, r) in report.retained.iter().enumerate() {
            let caption = |tag: &str| -> String {
                format!("{tag} {}>{}", short_class(&report.class_names, r.true_label), short_class(&report.class_names, r.pred_label))
            };
            let panels = vec![
                (caption("INPUT"), image_panel(&r.input)),
                ("A".to_string(), map_panel(&r.au_map)),
                (format!("M {}", report.cam_method), map_panel(&r.cam)),
                (format!("T {}", report.primary_layer), map_panel(&r.attention)),
            ];
            let fig = captioned_row(&panels);
            let path = samples_dir.join(format!("sample_{i:02}.png"));
            fig.save_png(&path)?;
            written.push(path);
        }
    }

    let labels: Vec<String> = report.class_names.clone();
    let conf_color: Vec<Vec<f64>> = report
        .confusion
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
        })
        .collect();
    let conf_text: Vec<Vec<String>> =
        report.confusion.iter().map(|row| row.iter().map(|c| c.to_string()).collect()).collect();
    let conf = heat_table("CONFUSION TRUE/PRED", &labels, &labels, &conf_color, &conf_text);
    let conf_path = dir.join("confusion_matrix.png");
    conf.save_png(&conf_path)?;
    written.push(conf_path);

    let cos_text: Vec<Vec<String>> = report
        .cosine_matrix
        .iter()
        .map(|row| row.iter().map(|v| format!("{v:.2}")).collect())
        .collect();
    let cos = heat_table(
        "COSINE TRUE CLASS / MAP SOURCE",
        &labels,
        &report.matrix_columns,
        &report.cosine_matrix,
        &cos_text,
    );
    let cos_path = dir.join("cosine_matrix.png");
    cos.save_png(&cos_path)?;
    written.push(cos_path);

    Ok(written)
}

fn short_class(names: &[String], idx: usize) -> String {
    names.get(idx).map(|n| truncate_to(n, 3)).unwrap_or_else(|| idx.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_map(h: usize, w: usize, seedish: f64) -> MapData {
        let data = (0..h * w).map(|i| (i as f64 * seedish).sin() * 0.5 + 0.5).collect();
        MapData { h, w, data }
    }

    fn fake_report(retained: usize) -> EvalReport {
        let k = 3;
        let class_names: Vec<String> = ["Alpha", "Beta", "Gamma"].iter().map(|s| s.to_string()).collect();
        let retained: Vec<crate::eval::RetainedSample> = (0..retained)
            .map(|i| crate::eval::RetainedSample {
                id: format!("s{i}"),
                true_label: i % k,
                pred_label: (i + 1) % k,
                input: ImageData { h: 8, w: 8, planes: vec![0.5; 3 * 64] },
                au_map: fake_map(8, 8, 0.3),
                cam: fake_map(8, 8, 0.7),
                attention: fake_map(8, 8, 1.1),
            })
            .collect();
        EvalReport {
            cam_method: "gradcampp".into(),
            primary_layer: "block4".into(),
            attention_layers: vec!["block4".into()],
            class_names: class_names.clone(),
            evaluated: 6,
            skipped: vec![],
            cl: 0.5,
            att_cos: 0.6,
            cam_cos: 0.55,
            confusion: vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 2]],
            matrix_columns: vec!["attention:block4".into(), "cam:gradcampp".into()],
            cosine_matrix: vec![vec![0.6, 0.5], vec![0.4, 0.3], vec![0.8, 0.7]],
            per_sample: vec![],
            retained,
            per_class_attention: (0..k).map(|i| fake_map(8, 8, 0.2 + i as f64)).collect(),
            per_class_cam: (0..k).map(|i| fake_map(8, 8, 0.4 + i as f64)).collect(),
        }
    }

    #[test]
    fn colormap_runs_dark_to_bright() {
        let lo = colormap(0.0);
        let hi = colormap(1.0);
        let lum = |c: [f64; 3]| 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
        assert!(lum(hi) > lum(lo) + 0.5);
        assert!(colormap(-1.0) == lo && colormap(2.0) == hi, "clamped outside [0,1]");
    }

    #[test]
    fn text_marks_pixels_within_bounds() {
        let mut img = ImageBuf::filled(12, 40, [1.0, 1.0, 1.0]);
        let end = draw_text(&mut img, 1, 1, 1, "AB:0.5", [0.0, 0.0, 0.0]);
        assert_eq!(end, 1 + 6 * 4);
        let dark = img.data().iter().filter(|&&v| v < 0.5).count();
        assert!(dark > 20, "glyphs must stamp pixels");
        // Out-of-bounds drawing is clipped, not panicking.
        draw_text(&mut img, 38, 10, 2, "XYZ", [0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_report_emits_all_figure_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = fake_report(2);
        let written = emit_figures(&report, dir.path()).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"figures/class_attention_grid.png".to_string()));
        assert!(names.contains(&"figures/class_cam_grid.png".to_string()));
        assert!(names.contains(&"figures/samples/sample_00.png".to_string()));
        assert!(names.contains(&"figures/samples/sample_01.png".to_string()));
        assert!(names.contains(&"figures/confusion_matrix.png".to_string()));
        assert!(names.contains(&"figures/cosine_matrix.png".to_string()));
        for p in &written {
            let img = ImageBuf::load_png(p).unwrap();
            assert!(img.w() > 0 && img.h() > 0);
        }
        // Grids have one column per class.
        let grid = ImageBuf::load_png(&written[0]).unwrap();
        assert_eq!(grid.w(), 3 * (PANEL + PAD) + PAD);
        // Sample panels have exactly four columns.
        let sample = ImageBuf::load_png(&dir.path().join("figures/samples/sample_00.png")).unwrap();
        assert_eq!(sample.w(), 4 * (PANEL + PAD) + PAD);
    }

    #[test]
    fn empty_retention_skips_sample_figures_only() {
        let dir = tempfile::tempdir().unwrap();
        let report = fake_report(0);
        let written = emit_figures(&report, dir.path()).unwrap();
        assert_eq!(written.len(), 4, "grids and tables only");
        assert!(!dir.path().join("figures/samples").exists());
    }

    #[test]
    fn seven_class_grid_has_seven_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = fake_report(0);
        report.class_names = (0..7).map(|i| format!("C{i}")).collect();
        report.per_class_attention = (0..7).map(|i| fake_map(8, 8, i as f64)).collect();
        report.per_class_cam = (0..7).map(|i| fake_map(8, 8, i as f64 + 0.5)).collect();
        report.confusion = vec![vec![1; 7]; 7];
        report.cosine_matrix = vec![vec![0.5; 2]; 7];
        let written = emit_figures(&report, dir.path()).unwrap();
        let grid = ImageBuf::load_png(&written[0]).unwrap();
        assert_eq!(grid.w(), 7 * (PANEL + PAD) + PAD);
    }
}

//! Ablation grids: sweep the alignment weight or the aligned layer sets,
//! training one full run per cell and reporting test metrics.
//!
//! Cell failures are logged and recorded without stopping the grid; the
//! caller turns a nonempty error list into a nonzero exit. Every cell
//! reuses the base seed, so duplicate cells reproduce identical metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::ToolkitError;
use crate::eval::{evaluate, EvalReport, REPORT_FILE};
use crate::formats::{load_codebook, write_atomic, DatasetManifest};
use crate::model::Network;
use crate::train::{train, validate_aligned_layers};

/// One completed grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    /// Cell label: the lambda value or the joined layer set.
    pub label: String,
    pub lambda: f64,
    pub layers: Vec<String>,
    pub cl: f64,
    pub cam_cos: f64,
    /// Attention cosine at the cell's primary (last aligned) layer.
    pub att_cos: f64,
    /// Mean attention cosine per evaluated layer.
    pub att_cos_per_layer: BTreeMap<String, f64>,
    pub run_dir: String,
}

/// Grid results plus any per-cell failures `(cell label, message)`.
#[derive(Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub errors: Vec<(String, String)>,
    pub written: Vec<PathBuf>,
}

impl AblationOutcome {
    pub fn all_cells_succeeded(&self) -> bool {
        self.errors.is_empty()
    }
}

fn sanitize_numeric(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "m")
}

/// Unique cell directory under `out_dir`: duplicates get `__2`, `__3`, ...
fn cell_dir(out_dir: &Path, base: &str, used: &mut BTreeMap<String, usize>) -> PathBuf {
    let n = used.entry(base.to_string()).or_insert(0);
    *n += 1;
    if *n == 1 {
        out_dir.join(base)
    } else {
        out_dir.join(format!("{base}__{n}"))
    }
}

/// Trains one cell and evaluates its selected checkpoint on the test
/// split. The cell's eval attends to the layers in `eval_layers` with the
/// last one as primary (headline) layer.
fn run_cell(
    cfg: &Config,
    train_m: &DatasetManifest,
    test_m: &DatasetManifest,
    eval_layers: &[String],
    dir: &Path,
) -> Result<(EvalReport, BTreeMap<String, f64>), ToolkitError> {
    let mut cfg = cfg.clone();
    cfg.eval.attention_layers = eval_layers.to_vec();
    cfg.eval.primary_layer = eval_layers.last().cloned().unwrap_or_default();
    cfg.validate()?;
    let outcome = train(&cfg, train_m, dir)?;
    let mut net = Network::load(&outcome.best_checkpoint())?;
    let cb = load_codebook(Path::new(&cfg.codebook.path))?;
    let report = evaluate(&mut net, test_m, &cb, &cfg)?;
    report.save(&dir.join(REPORT_FILE))?;
    let mut per_layer = BTreeMap::new();
    for layer in &report.attention_layers {
        let mean = report.per_sample.iter().map(|r| r.att_cos[layer]).sum::<f64>()
            / report.per_sample.len().max(1) as f64;
        per_layer.insert(layer.clone(), mean);
    }
    Ok((report, per_layer))
}

fn write_table(out_dir: &Path, rows: &[AblationRow], errors: &[(String, String)]) -> Result<Vec<PathBuf>, ToolkitError> {
    let mut csv = String::from("label,lambda,layers,cl,cam_cos,att_cos\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.lambda,
            r.layers.join("+"),
            r.cl,
            r.cam_cos,
            r.att_cos
        ));
    }
    let csv_path = out_dir.join("table.csv");
    write_atomic(&csv_path, csv.as_bytes())?;
    let json = serde_json::json!({ "rows": rows, "errors": errors });
    let json_path = out_dir.join("table.json");
    write_atomic(&json_path, serde_json::to_string_pretty(&json).unwrap().as_bytes())?;
    Ok(vec![csv_path, json_path])
}

/// Sweeps the alignment weight. Each cell trains with the base config at
/// one grid value; metrics come from the test split via the selected
/// checkpoint. Emits `table.csv`, `table.json`, and a two-axis plot with
/// the unaligned run's values as dashed baselines.
pub fn ablate_lambda(
    cfg: &Config,
    train_m: &DatasetManifest,
    test_m: &DatasetManifest,
    grid: &[f64],
    out_dir: &Path,
) -> Result<AblationOutcome, ToolkitError> {
    if grid.is_empty() {
        return Err(ToolkitError::config("ablate.lambda_grid", "grid must not be empty"));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| ToolkitError::RunDir { path: out_dir.to_path_buf(), message: e.to_string() })?;
    // The attention layer under study is the aligned set, measured
    // identically in every arm (including the unaligned one).
    let eval_layers = if cfg.eval.attention_layers.is_empty() {
        cfg.train.aligned_layers.clone()
    } else {
        cfg.eval.attention_layers.clone()
    };
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut used = BTreeMap::new();
    for &lambda in grid {
        let label = format!("{lambda}");
        let dir = cell_dir(out_dir, &format!("lambda_{}", sanitize_numeric(lambda)), &mut used);
        let mut cell_cfg = cfg.clone();
        cell_cfg.train.lambda = lambda;
        match run_cell(&cell_cfg, train_m, test_m, &eval_layers, &dir) {
            Ok((report, per_layer)) => rows.push(AblationRow {
                label,
                lambda,
                layers: cell_cfg.train.aligned_layers.clone(),
                cl: report.cl,
                cam_cos: report.cam_cos,
                att_cos: report.att_cos,
                att_cos_per_layer: per_layer,
                run_dir: dir.to_string_lossy().into_owned(),
            }),
            Err(e) => {
                log::error!("lambda {lambda}: cell failed: {e}");
                errors.push((label, e.to_string()));
            }
        }
    }
    let mut written = write_table(out_dir, &rows, &errors)?;
    if !rows.is_empty() {
        let plot = lambda_plot_svg(&rows);
        let plot_path = out_dir.join("lambda_plot.svg");
        write_atomic(&plot_path, plot.as_bytes())?;
        written.push(plot_path);
    }
    Ok(AblationOutcome { rows, errors, written })
}

/// Sweeps aligned layer sets. Every set is validated against the backbone
/// before any cell trains.
pub fn ablate_layers(
    cfg: &Config,
    train_m: &DatasetManifest,
    test_m: &DatasetManifest,
    sets: &[Vec<String>],
    out_dir: &Path,
) -> Result<AblationOutcome, ToolkitError> {
    if sets.is_empty() {
        return Err(ToolkitError::config("ablate.layer_sets", "set list must not be empty"));
    }
    let probe = Network::from_backbone(&cfg.model.backbone, cfg.model.num_classes, cfg.run.seed)?;
    for set in sets {
        validate_aligned_layers(&probe, set)?;
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| ToolkitError::RunDir { path: out_dir.to_path_buf(), message: e.to_string() })?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut used = BTreeMap::new();
    for set in sets {
        let label = set.join("+");
        let dir = cell_dir(out_dir, &format!("layers_{label}"), &mut used);
        let mut cell_cfg = cfg.clone();
        cell_cfg.train.aligned_layers = set.clone();
        match run_cell(&cell_cfg, train_m, test_m, set, &dir) {
            Ok((report, per_layer)) => rows.push(AblationRow {
                label,
                lambda: cell_cfg.train.lambda,
                layers: set.clone(),
                cl: report.cl,
                cam_cos: report.cam_cos,
                att_cos: report.att_cos,
                att_cos_per_layer: per_layer,
                run_dir: dir.to_string_lossy().into_owned(),
            }),
            Err(e) => {
                log::error!("layers {label}: cell failed: {e}");
                errors.push((label, e.to_string()));
            }
        }
    }
    let written = write_table(out_dir, &rows, &errors)?;
    Ok(AblationOutcome { rows, errors, written })
}

/// Two-axis SVG: localization cosines against the left axis, accuracy
/// against the right, both in [0, 1]; dashed horizontal lines mark the
/// unaligned (lambda = 0) arm where present.
fn lambda_plot_svg(rows: &[AblationRow]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 70.0, 40.0, 60.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap());
    sorted.dedup_by(|a, b| a.lambda == b.lambda);
    let xmin = sorted.first().map(|r| r.lambda).unwrap_or(0.0);
    let xmax = sorted.last().map(|r| r.lambda).unwrap_or(1.0);
    let span = (xmax - xmin).max(1e-9);
    let x = |l: f64| left + (l - xmin) / span * plot_w;
    let y = |v: f64| top + (1.0 - v.clamp(0.0, 1.0)) * plot_h;

    let series = |vals: &[(f64, f64)], color: &str, dash: bool, label: &str| -> String {
        let pts: Vec<String> = vals.iter().map(|&(l, v)| format!("{:.2},{:.2}", x(l), y(v))).collect();
        let dots: String = vals
            .iter()
            .map(|&(l, v)| format!(r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, x(l), y(v)))
            .collect();
        let dash_attr = if dash { r#" stroke-dasharray="6 4""# } else { "" };
        format!(
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash_attr}/><!--{label}-->{dots}"#,
            pts.join(" ")
        )
    };

    let att: Vec<(f64, f64)> = sorted.iter().map(|r| (r.lambda, r.att_cos)).collect();
    let cam: Vec<(f64, f64)> = sorted.iter().map(|r| (r.lambda, r.cam_cos)).collect();
    let cl: Vec<(f64, f64)> = sorted.iter().map(|r| (r.lambda, r.cl)).collect();

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    ));
    svg.push_str(&format!(r#"<rect width="{w}" height="{h}" fill="white"/>"#));
    svg.push_str(&format!(
        r#"<text x="{:.0}" y="22" font-size="15">Alignment weight sweep: localization (left) and accuracy (right)</text>"#,
        left
    ));
    // Axes and ticks.
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let yy = y(v);
        svg.push_str(&format!(
            r##"<line x1="{left}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#ddd"/>"##,
            w - right
        ));
        svg.push_str(&format!(
            r##"<text x="{:.2}" y="{:.2}" text-anchor="end" fill="#444">{v:.2}</text>"##,
            left - 8.0,
            yy + 4.0
        ));
        svg.push_str(&format!(
            r##"<text x="{:.2}" y="{:.2}" text-anchor="start" fill="#444">{v:.2}</text>"##,
            w - right + 8.0,
            yy + 4.0
        ));
    }
    for r in &sorted {
        let xx = x(r.lambda);
        svg.push_str(&format!(
            r##"<line x1="{xx:.2}" y1="{:.2}" x2="{xx:.2}" y2="{:.2}" stroke="#eee"/>"##,
            top,
            h - bottom
        ));
        svg.push_str(&format!(
            r##"<text x="{xx:.2}" y="{:.2}" text-anchor="middle" fill="#444">{}</text>"##,
            h - bottom + 18.0,
            r.lambda
        ));
    }
    svg.push_str(&format!(
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">alignment weight</text>"#,
        left + plot_w / 2.0,
        h - 16.0
    ));
    // Dashed baselines from the unaligned arm.
    if let Some(base) = sorted.iter().find(|r| r.lambda == 0.0) {
        for (v, color) in [(base.att_cos, "#1f77b4"), (base.cam_cos, "#2ca02c"), (base.cl, "#d62728")] {
            let yy = y(v);
            svg.push_str(&format!(
                r#"<line x1="{left}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="6 4" opacity="0.7"/>"#,
                w - right
            ));
        }
    }
    svg.push_str(&series(&att, "#1f77b4", false, "attention cosine"));
    svg.push_str(&series(&cam, "#2ca02c", false, "cam cosine"));
    svg.push_str(&series(&cl, "#d62728", false, "accuracy"));
    // Legend.
    let legend = [("attention cosine (L)", "#1f77b4"), ("cam cosine (L)", "#2ca02c"), ("accuracy (R)", "#d62728")];
    for (i, (name, color)) in legend.iter().enumerate() {
        let ly = top + 14.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#,
            left + 10.0,
            left + 34.0
        ));
        svg.push_str(&format!(
            r##"<text x="{:.2}" y="{ly:.2}" dy="4" fill="#222">{name}</text>"##,
            left + 40.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

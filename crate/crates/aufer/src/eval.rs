//! Evaluation: accuracy plus localization scores against action-unit maps.
//!
//! Protocol per sample: predict the class; build the ground-truth AU map
//! from the TRUE label in the center-crop frame; take each requested
//! layer's channel-mean attention and the CAM for the PREDICTED class;
//! upsample those maps to the AU-map size, min-max normalize them, and
//! score cosine similarity against the AU map (which is already in
//! `[0, 1]` by construction and is left untouched). Samples whose
//! landmarks cannot produce an AU map are skipped and counted.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use aufer_core::align::{cosine_sim, layer_attention, FeatureStack};
use aufer_core::aumap::{build_au_map, resize_map, AuMapParams};
use aufer_core::codebook::{Codebook, Expression};
use aufer_core::map::Map2;
use serde::{Deserialize, Serialize};

use crate::cams::CamRegistry;
use crate::config::Config;
use crate::data::{to_input, Dataset};
use crate::error::ToolkitError;
use crate::formats::{write_atomic, DatasetManifest};
use crate::img::ImageBuf;
use crate::model::Network;

pub const REPORT_FILE: &str = "report.json";

/// A dense map in serialization-friendly form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapData {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl MapData {
    pub fn from_map(m: &Map2) -> MapData {
        MapData { h: m.h(), w: m.w(), data: m.data().to_vec() }
    }

    pub fn to_map(&self) -> Map2 {
        Map2::from_vec(self.h, self.w, self.data.clone())
    }
}

/// A planar RGB image in serialization-friendly form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageData {
    pub h: usize,
    pub w: usize,
    /// Three planes, `[channel][y][x]`, values in `[0, 1]`.
    pub planes: Vec<f64>,
}

impl ImageData {
    pub fn from_image(im: &ImageBuf) -> ImageData {
        ImageData { h: im.h(), w: im.w(), planes: im.data().to_vec() }
    }
}

/// Per-sample scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub true_label: usize,
    pub pred_label: usize,
    /// Attention cosine per requested layer, against the true-label map.
    pub att_cos: BTreeMap<String, f64>,
    /// CAM cosine (predicted class) against the true-label map.
    pub cam_cos: f64,
}

/// Full map set kept for the first few samples, for figure rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedSample {
    pub id: String,
    pub true_label: usize,
    pub pred_label: usize,
    pub input: ImageData,
    pub au_map: MapData,
    pub cam: MapData,
    pub attention: MapData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cam_method: String,
    pub primary_layer: String,
    pub attention_layers: Vec<String>,
    pub class_names: Vec<String>,
    pub evaluated: usize,
    /// `(id, reason)` for every skipped sample.
    pub skipped: Vec<(String, String)>,
    /// Top-1 accuracy.
    pub cl: f64,
    /// Mean attention cosine at the primary layer.
    pub att_cos: f64,
    /// Mean CAM cosine.
    pub cam_cos: f64,
    /// `confusion[true][pred]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Column labels of `cosine_matrix`: one per attention layer, then CAM.
    pub matrix_columns: Vec<String>,
    /// Per-true-class mean cosine for each column; 0 for empty classes.
    pub cosine_matrix: Vec<Vec<f64>>,
    pub per_sample: Vec<SampleRow>,
    pub retained: Vec<RetainedSample>,
    /// Per-class mean attention map at the primary layer (crop frame).
    pub per_class_attention: Vec<MapData>,
    /// Per-class mean CAM (crop frame).
    pub per_class_cam: Vec<MapData>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<(), ToolkitError> {
        let text = serde_json::to_string(self)
            .map_err(|e| ToolkitError::Eval(format!("report serialization: {e}")))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<EvalReport, ToolkitError> {
        let text = std::fs::read_to_string(path).map_err(|e| ToolkitError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ToolkitError::format(path, e.to_string()))
    }
}

/// Upsamples `map` to `size` (when needed) and min-max normalizes.
pub fn upsampled_normalized(map: &Map2, size: (usize, usize)) -> Map2 {
    let resized =
        if map.shape() == size { map.clone() } else { resize_map(map, size).expect("nonzero size") };
    resized.minmax_normalized()
}

/// Builds the confusion and per-class mean-cosine matrices from sample
/// rows. `columns` entries are `attention:<layer>` or `cam:<method>`.
pub fn confusion_and_cosine_matrices(
    rows: &[SampleRow],
    k: usize,
    columns: &[String],
) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let mut confusion = vec![vec![0usize; k]; k];
    let mut sums = vec![vec![0.0f64; columns.len()]; k];
    let mut counts = vec![0usize; k];
    for r in rows {
        confusion[r.true_label][r.pred_label] += 1;
        counts[r.true_label] += 1;
        for (j, col) in columns.iter().enumerate() {
            let v = match col.split_once(':') {
                Some(("attention", layer)) => r.att_cos[layer],
                Some(("cam", _)) => r.cam_cos,
                _ => panic!("bad matrix column label {col:?}"),
            };
            sums[r.true_label][j] += v;
        }
    }
    let cosine = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &n)| {
            row.into_iter().map(|s| if n == 0 { 0.0 } else { s / n as f64 }).collect()
        })
        .collect();
    (confusion, cosine)
}

/// Resolves the attention layer list and the primary (headline) layer.
fn resolve_layers(net: &Network, cfg: &Config) -> Result<(Vec<String>, String), ToolkitError> {
    let layers: Vec<String> = if cfg.eval.attention_layers.is_empty() {
        net.tap_ids().into_iter().map(str::to_string).collect()
    } else {
        for l in &cfg.eval.attention_layers {
            if !net.has_tap(l) {
                return Err(ToolkitError::config(
                    "eval.attention_layers",
                    format!("layer {l:?} is not a tap of backbone {} (taps: {})", net.backbone(), net.tap_ids().join(", ")),
                ));
            }
        }
        cfg.eval.attention_layers.clone()
    };
    let primary = if cfg.eval.primary_layer.is_empty() {
        layers.last().expect("tap list is never empty").clone()
    } else {
        if !layers.contains(&cfg.eval.primary_layer) {
            return Err(ToolkitError::config(
                "eval.primary_layer",
                format!("{:?} is not among the attention layers ({})", cfg.eval.primary_layer, layers.join(", ")),
            ));
        }
        cfg.eval.primary_layer.clone()
    };
    Ok((layers, primary))
}

/// Evaluates `net` on the manifest split per the config.
pub fn evaluate(
    net: &mut Network,
    manifest: &DatasetManifest,
    cb: &Codebook,
    cfg: &Config,
) -> Result<EvalReport, ToolkitError> {
    let k = net.num_classes();
    if k != manifest.class_names.len() {
        return Err(ToolkitError::Eval(format!(
            "model has {k} classes, manifest lists {}",
            manifest.class_names.len()
        )));
    }
    let (layers, primary) = resolve_layers(net, cfg)?;
    let registry = CamRegistry::builtin();
    let plugin = registry.get(&cfg.eval.cam_method)?;
    if cfg.eval.cam_method == "cam" && !net.has_gap_linear_head() {
        return Err(ToolkitError::ArchitectureMismatch {
            method: "cam".to_string(),
            backbone: net.backbone().to_string(),
        });
    }
    let params = AuMapParams { floor: cfg.aumap.floor, radius_scale: cfg.aumap.radius_scale };
    let crop = cfg.data.crop;
    let ds = Dataset::load(manifest, cfg.data.resize, crop)?;
    let mut skipped: Vec<(String, String)> = ds.skipped.clone();

    let mut want: BTreeSet<String> = layers.iter().cloned().collect();
    want.insert(net.cam_tap_id().to_string());

    let mut rows: Vec<SampleRow> = Vec::new();
    let mut retained: Vec<RetainedSample> = Vec::new();
    let mut att_sum_primary = 0.0;
    let mut cam_sum = 0.0;
    let mut correct = 0usize;
    let mut class_att_sum: Vec<Option<Map2>> = vec![None; k];
    let mut class_cam_sum: Vec<Option<Map2>> = vec![None; k];
    let mut class_counts = vec![0usize; k];

    for i in 0..ds.len() {
        let view = ds.eval_view(i);
        let sample_id = ds.samples[i].id.clone();
        let expr = Expression::ALL[view.label];
        let a_true = match build_au_map(expr, &view.landmarks, cb, (crop, crop), params) {
            Ok(hm) => hm.into_map(),
            Err(e) => {
                skipped.push((sample_id, e.to_string()));
                continue;
            }
        };
        let x = to_input(&[&view]);
        let pass = net.forward(&x, false, &want);
        let pred = pass.predictions()[0];

        let mut att_cos = BTreeMap::new();
        let mut primary_att_map = None;
        for layer in &layers {
            let tap = &pass.taps[layer];
            let (_, c, th, tw) = tap.shape();
            let f = FeatureStack::new(layer.clone(), c, th, tw, tap.sample(0).to_vec());
            let t_norm = upsampled_normalized(&layer_attention(&f).values, (crop, crop));
            let cos = cosine_sim(&t_norm, &a_true);
            att_cos.insert(layer.clone(), cos);
            if layer == &primary {
                primary_att_map = Some(t_norm);
            }
        }
        let cam_raw = plugin.compute(net, &x, pred)?;
        let cam_norm = upsampled_normalized(&cam_raw, (crop, crop));
        let cam_cos = cosine_sim(&cam_norm, &a_true);

        correct += usize::from(pred == view.label);
        att_sum_primary += att_cos[&primary];
        cam_sum += cam_cos;
        class_counts[view.label] += 1;
        let primary_att_map = primary_att_map.expect("primary is among the layers");
        accumulate(&mut class_att_sum[view.label], &primary_att_map);
        accumulate(&mut class_cam_sum[view.label], &cam_norm);

        if retained.len() < cfg.eval.retain_per_sample {
            retained.push(RetainedSample {
                id: ds.samples[i].id.clone(),
                true_label: view.label,
                pred_label: pred,
                input: ImageData::from_image(&view.image),
                au_map: MapData::from_map(&a_true),
                cam: MapData::from_map(&cam_norm),
                attention: MapData::from_map(&primary_att_map),
            });
        }
        rows.push(SampleRow { id: ds.samples[i].id.clone(), true_label: view.label, pred_label: pred, att_cos, cam_cos });
    }

    if rows.is_empty() {
        return Err(ToolkitError::Eval(format!(
            "no evaluable samples ({} skipped)",
            skipped.len()
        )));
    }
    let n = rows.len() as f64;
    let mut matrix_columns: Vec<String> = layers.iter().map(|l| format!("attention:{l}")).collect();
    matrix_columns.push(format!("cam:{}", cfg.eval.cam_method));
    let (confusion, cosine_matrix) = confusion_and_cosine_matrices(&rows, k, &matrix_columns);

    let mean_map = |sum: &Option<Map2>, count: usize| -> MapData {
        match sum {
            Some(m) if count > 0 => {
                let mut mean = m.clone();
                mean.map_inplace(|v| v / count as f64);
                MapData::from_map(&mean)
            }
            _ => MapData::from_map(&Map2::zeros(crop, crop)),
        }
    };
    let per_class_attention =
        (0..k).map(|c| mean_map(&class_att_sum[c], class_counts[c])).collect();
    let per_class_cam = (0..k).map(|c| mean_map(&class_cam_sum[c], class_counts[c])).collect();

    Ok(EvalReport {
        cam_method: cfg.eval.cam_method.clone(),
        primary_layer: primary,
        attention_layers: layers,
        class_names: manifest.class_names.clone(),
        evaluated: rows.len(),
        skipped,
        cl: correct as f64 / n,
        att_cos: att_sum_primary / n,
        cam_cos: cam_sum / n,
        confusion,
        matrix_columns,
        cosine_matrix,
        per_sample: rows,
        retained,
        per_class_attention,
        per_class_cam,
    })
}

fn accumulate(slot: &mut Option<Map2>, add: &Map2) {
    match slot {
        Some(m) => {
            for (dst, src) in m.data_mut().iter_mut().zip(add.data()) {
                *dst += src;
            }
        }
        None => *slot = Some(add.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{load_codebook, load_manifest, Layout, Split};
    use crate::synth;

    fn sample_row(id: &str, t: usize, p: usize, att: f64, cam: f64) -> SampleRow {
        let mut att_cos = BTreeMap::new();
        att_cos.insert("block4".to_string(), att);
        SampleRow { id: id.into(), true_label: t, pred_label: p, att_cos, cam_cos: cam }
    }

    fn columns() -> Vec<String> {
        vec!["attention:block4".to_string(), "cam:gradcampp".to_string()]
    }

    #[test]
    fn all_correct_predictions_give_a_diagonal_confusion() {
        let rows: Vec<SampleRow> =
            (0..3).map(|c| sample_row(&format!("s{c}"), c, c, 0.5, 0.5)).collect();
        let (conf, _) = confusion_and_cosine_matrices(&rows, 3, &columns());
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(conf[t][p], usize::from(t == p));
            }
        }
    }

    #[test]
    fn single_sample_fills_one_cell() {
        let rows = vec![sample_row("a", 1, 2, 0.3, 0.4)];
        let (conf, cos) = confusion_and_cosine_matrices(&rows, 3, &columns());
        let total: usize = conf.iter().flatten().sum();
        assert_eq!(total, 1);
        assert_eq!(conf[1][2], 1);
        assert_eq!(cos[1], vec![0.3, 0.4]);
        assert_eq!(cos[0], vec![0.0, 0.0], "empty class rows are zero");
    }

    #[test]
    fn cosine_matrix_averages_within_a_class() {
        let rows = vec![sample_row("a", 0, 0, 0.4, 0.2), sample_row("b", 0, 1, 0.6, 0.4)];
        let (conf, cos) = confusion_and_cosine_matrices(&rows, 2, &columns());
        assert!((cos[0][0] - 0.5).abs() < 1e-12);
        assert!((cos[0][1] - 0.3).abs() < 1e-12);
        assert_eq!(conf[0], vec![1, 1]);
    }

    #[test]
    fn identical_map_scores_cosine_one() {
        // Self-similarity: a map scored against itself through the
        // upsample+normalize path gives exactly 1.
        let mut m = Map2::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                m.set(y, x, 0.02 + (y * x) as f64 / 49.0);
            }
        }
        let scored = upsampled_normalized(&m, (8, 8));
        assert!((cosine_sim(&scored, &scored) - 1.0).abs() < 1e-12);
    }

    fn tiny_eval(cfg_mut: impl FnOnce(&mut Config)) -> (EvalReport, Vec<String>) {
        let dir = tempfile::tempdir().unwrap();
        let cb = load_codebook(Path::new("default")).unwrap();
        synth::generate(dir.path(), 5, 3, 48, &cb, AuMapParams::default()).unwrap();
        let manifest = load_manifest(dir.path(), Layout::ManifestFile, Split::Test).unwrap();
        let mut cfg = Config::default();
        cfg.data.resize = 48;
        cfg.data.crop = 40;
        cfg.eval.retain_per_sample = 2;
        cfg_mut(&mut cfg);
        let mut net = Network::small_cnn(7, 0);
        let report = evaluate(&mut net, &manifest, &cb, &cfg).unwrap();
        let names = manifest.class_names.clone();
        (report, names)
    }

    #[test]
    fn untrained_model_report_is_coherent() {
        let (report, names) = tiny_eval(|_| {});
        assert_eq!(report.evaluated, 7);
        assert!(report.skipped.is_empty());
        assert_eq!(report.class_names, names);
        assert!((0.0..=1.0).contains(&report.cl));
        // Confusion row sums equal per-class counts (one per class here).
        for row in &report.confusion {
            assert_eq!(row.iter().sum::<usize>(), 1);
        }
        for row in &report.cosine_matrix {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(report.matrix_columns.len(), report.attention_layers.len() + 1);
        assert_eq!(report.primary_layer, "pool4", "defaults to the last tap");
        assert_eq!(report.retained.len(), 2);
        // Headline att_cos matches the per-sample mean at the primary layer.
        let mean: f64 = report.per_sample.iter().map(|r| r.att_cos[&report.primary_layer]).sum::<f64>()
            / report.per_sample.len() as f64;
        assert!((report.att_cos - mean).abs() < 1e-12);
    }

    #[test]
    fn corrupt_landmarks_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let cb = load_codebook(Path::new("default")).unwrap();
        synth::generate(dir.path(), 6, 3, 48, &cb, AuMapParams::default()).unwrap();
        std::fs::write(dir.path().join("landmarks/Sadness_002.txt"), "garbage\n").unwrap();
        let manifest = load_manifest(dir.path(), Layout::ManifestFile, Split::Test).unwrap();
        let mut cfg = Config::default();
        cfg.data.resize = 48;
        cfg.data.crop = 40;
        let mut net = Network::small_cnn(7, 1);
        let report = evaluate(&mut net, &manifest, &cb, &cfg).unwrap();
        assert_eq!(report.evaluated, 6);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, "images/Sadness_002");
    }

    #[test]
    fn report_round_trips_through_json() {
        let (report, _) = tiny_eval(|cfg| cfg.eval.retain_per_sample = 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(REPORT_FILE);
        report.save(&path).unwrap();
        let back = EvalReport::load(&path).unwrap();
        assert_eq!(back.per_sample, report.per_sample);
        assert_eq!(back.retained, report.retained);
        assert_eq!(back.confusion, report.confusion);
        assert!((back.att_cos - report.att_cos).abs() < 1e-15);
    }

    #[test]
    fn unknown_attention_layer_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cb = load_codebook(Path::new("default")).unwrap();
        synth::generate(dir.path(), 7, 2, 48, &cb, AuMapParams::default()).unwrap();
        let manifest = load_manifest(dir.path(), Layout::ManifestFile, Split::Test).unwrap();
        let mut cfg = Config::default();
        cfg.data.resize = 48;
        cfg.data.crop = 40;
        cfg.eval.attention_layers = vec!["nope".into()];
        let mut net = Network::small_cnn(7, 0);
        let err = evaluate(&mut net, &manifest, &cb, &cfg).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }
}

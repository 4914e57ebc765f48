//! Training harness: composite objective, SGD with momentum, per-epoch
//! metrics and checkpoints, and accuracy-based model selection.
//!
//! Reproducibility contract: given the same config and seed, two runs
//! produce byte-identical metric logs. Every random draw (parameter init,
//! validation split, shuffles, crop offsets, flips) comes from one seeded
//! stream consumed in a fixed order, and all reductions are ordered.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use aufer_core::align::{aligned_pair_loss_grad, FeatureStack};
use aufer_core::aumap::{build_au_map, resize_map, AuMapParams};
use aufer_core::codebook::{Codebook, Expression};
use aufer_core::map::Map2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{to_input, Dataset, View};
use crate::error::ToolkitError;
use crate::formats::{load_codebook, write_atomic, DatasetManifest};
use crate::model::{Network, Tensor4};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_FILE: &str = "best.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One logged epoch. `epoch` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub train_align: f64,
    pub train_total: f64,
    pub val_cl: f64,
}

/// Result of a completed training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// 1-based epoch with the best validation accuracy (earliest on ties).
    pub best_epoch: usize,
    pub best_val_cl: f64,
    pub rows: Vec<EpochRow>,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> PathBuf {
        checkpoint_path(&self.run_dir, self.best_epoch)
    }
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:03}.ckpt"))
}

/// Learning rate for a 1-based `epoch` out of `total`.
pub fn schedule_lr(schedule: &str, base: f64, epoch: usize, total: usize) -> f64 {
    match schedule {
        "constant" => base,
        // Half-cosine decay from `base` toward zero over the run.
        _ => base * 0.5 * (1.0 + (core::f64::consts::PI * (epoch - 1) as f64 / total as f64).cos()),
    }
}

/// Fails when an alignment layer is not a tap of the backbone.
pub fn validate_aligned_layers(net: &Network, layers: &[String]) -> Result<(), ToolkitError> {
    if layers.is_empty() {
        return Err(ToolkitError::config("train.aligned_layers", "layer set must not be empty"));
    }
    for l in layers {
        if !net.has_tap(l) {
            return Err(ToolkitError::config(
                "train.aligned_layers",
                format!(
                    "layer {l:?} is not a tap of backbone {} (taps: {})",
                    net.backbone(),
                    net.tap_ids().join(", ")
                ),
            ));
        }
    }
    Ok(())
}

/// Seeded stratified split: returns (train indices, validation indices).
/// Each class contributes `floor(fraction * count)` validation samples,
/// but never its last remaining sample.
fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for group in &mut by_class {
        group.shuffle(rng);
        let take = ((group.len() as f64 * fraction).floor() as usize).min(group.len().saturating_sub(1));
        val.extend_from_slice(&group[..take]);
        train.extend_from_slice(&group[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// SGD with classical momentum and decoupled-from-nothing weight decay
/// folded into the gradient: `v = mu*v + (g + wd*w); w -= lr*v`.
struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(net: &Network, momentum: f64, weight_decay: f64) -> Sgd {
        let velocity = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Sgd { velocity, momentum, weight_decay }
    }

    fn step(&mut self, net: &mut Network, lr: f64) {
        for (p, vel) in net.params_mut().into_iter().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i] + self.weight_decay * p.value[i];
                vel[i] = self.momentum * vel[i] + g;
                p.value[i] -= lr * vel[i];
            }
        }
    }
}

/// Trains per the config, writing into `run_dir`: a config snapshot,
/// `metrics.csv` (rewritten atomically after every epoch), one checkpoint
/// per epoch, and `best.json` for the selected model.
pub fn train(cfg: &Config, manifest: &DatasetManifest, run_dir: &Path) -> Result<TrainOutcome, ToolkitError> {
    let k = cfg.model.num_classes;
    if k != manifest.class_names.len() {
        return Err(ToolkitError::config(
            "model.num_classes",
            format!("config says {k} classes, manifest lists {}", manifest.class_names.len()),
        ));
    }
    let lambda = cfg.train.lambda;
    let mut net = Network::from_backbone(&cfg.model.backbone, k, cfg.run.seed)?;
    if lambda > 0.0 {
        validate_aligned_layers(&net, &cfg.train.aligned_layers)?;
    }
    let cb = load_codebook(Path::new(&cfg.codebook.path))?;
    let params = AuMapParams { floor: cfg.aumap.floor, radius_scale: cfg.aumap.radius_scale };

    std::fs::create_dir_all(run_dir.join(CHECKPOINT_DIR))
        .map_err(|e| ToolkitError::RunDir { path: run_dir.to_path_buf(), message: e.to_string() })?;
    cfg.write_snapshot(run_dir)?;

    let ds = Dataset::load(manifest, cfg.data.resize, cfg.data.crop)?;
    if !ds.skipped.is_empty() {
        log::warn!(
            "{} training sample(s) dropped for unusable landmarks: {}",
            ds.skipped.len(),
            ds.skipped.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(", ")
        );
    }
    if ds.is_empty() {
        return Err(ToolkitError::Train("no usable training samples".to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(ToolkitError::Train(format!("label {bad} out of range for {k} classes")));
    }
    let (train_idx, val_idx) = stratified_split(&labels, k, cfg.data.val_fraction, &mut rng);
    if val_idx.is_empty() {
        log::warn!("validation split is empty; selection accuracy is measured on the training set");
    }

    let aligned: Vec<String> = if lambda > 0.0 { cfg.train.aligned_layers.clone() } else { Vec::new() };
    let want: BTreeSet<String> = aligned.iter().cloned().collect();
    let crop = cfg.data.crop;
    let mut sgd = Sgd::new(&net, cfg.train.momentum, cfg.train.weight_decay);
    let mut rows: Vec<EpochRow> = Vec::new();
    let mut shuffled: Vec<usize> = train_idx.clone();

    for epoch in 1..=cfg.train.epochs {
        let lr = schedule_lr(&cfg.train.schedule, cfg.train.lr, epoch, cfg.train.epochs);
        shuffled.shuffle(&mut rng);
        let mut ce_sum = 0.0;
        let mut align_sum = 0.0;
        let mut total_sum = 0.0;
        let mut seen = 0usize;

        for (bi, chunk) in shuffled.chunks(cfg.train.batch_size.max(1)).enumerate() {
            let views: Vec<View> =
                chunk.iter().map(|&i| ds.train_view(i, cfg.data.hflip, &mut rng)).collect();
            let refs: Vec<&View> = views.iter().collect();
            let x = to_input(&refs);
            net.zero_grads();
            let pass = net.forward(&x, true, &want);
            let n = views.len() as f64;

            let mut ce_batch = 0.0;
            let mut d_logits = vec![vec![0.0; k]; views.len()];
            for (i, v) in views.iter().enumerate() {
                ce_batch += -pass.log_probs[i][v.label];
                for j in 0..k {
                    let soft = pass.log_probs[i][j].exp();
                    d_logits[i][j] = (soft - if j == v.label { 1.0 } else { 0.0 }) / n;
                }
            }
            ce_batch /= n;

            // AU maps in the crop frame, shared by every aligned layer.
            let mut align_batch = 0.0;
            let mut inject: BTreeMap<String, Tensor4> = BTreeMap::new();
            if lambda > 0.0 {
                let maps: Vec<Map2> = views
                    .iter()
                    .map(|v| build_train_map(v, &ds, &cb, crop, params))
                    .collect::<Result<_, _>>()?;
                for layer in &aligned {
                    let tap = &pass.taps[layer];
                    let (_, c, th, tw) = tap.shape();
                    let mut g = Tensor4::zeros(views.len(), c, th, tw);
                    for (i, a_crop) in maps.iter().enumerate() {
                        let a_tap = resize_map(a_crop, (th, tw)).expect("tap shape is nonzero");
                        let f = FeatureStack::new(layer.clone(), c, th, tw, tap.sample(i).to_vec());
                        let (term, df, _zero_norm) = aligned_pair_loss_grad(&f, &a_tap);
                        align_batch += term;
                        let scale = lambda / n;
                        for (dst, src) in g.sample_mut(i).iter_mut().zip(df.data()) {
                            *dst = src * scale;
                        }
                    }
                    inject.insert(layer.clone(), g);
                }
                align_batch /= n;
            }

            let total_batch = ce_batch + lambda * align_batch;
            if !total_batch.is_finite() {
                return Err(ToolkitError::Train(format!(
                    "non-finite loss at epoch {epoch}, batch {bi} (first sample {})",
                    ds.samples[chunk[0]].id
                )));
            }
            net.backward(&d_logits, &inject, &BTreeSet::new(), true);
            sgd.step(&mut net, lr);

            ce_sum += ce_batch * n;
            align_sum += align_batch * n;
            total_sum += total_batch * n;
            seen += views.len();
        }

        let denom = seen.max(1) as f64;
        let eval_idx: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let val_cl = accuracy(&mut net, &ds, eval_idx, cfg.train.batch_size.max(1));
        let row = EpochRow {
            epoch,
            lr,
            train_ce: ce_sum / denom,
            train_align: align_sum / denom,
            train_total: total_sum / denom,
            val_cl,
        };
        rows.push(row);
        write_metrics(&run_dir.join(METRICS_FILE), &rows)?;
        net.save(&checkpoint_path(run_dir, epoch))?;
        log::info!(
            "epoch {epoch}/{}: lr {lr:.5} ce {:.4} align {:.4} total {:.4} val_cl {:.4}",
            cfg.train.epochs,
            rows.last().unwrap().train_ce,
            rows.last().unwrap().train_align,
            rows.last().unwrap().train_total,
            val_cl
        );
    }

    let (best_epoch, best_val_cl) = select_best_rows(&rows)
        .ok_or_else(|| ToolkitError::Train("run logged no epochs".to_string()))?;
    let best = serde_json::json!({
        "epoch": best_epoch,
        "val_cl": best_val_cl,
        "checkpoint": format!("{CHECKPOINT_DIR}/epoch_{best_epoch:03}.ckpt"),
    });
    write_atomic(&run_dir.join(BEST_FILE), serde_json::to_string_pretty(&best).unwrap().as_bytes())?;
    Ok(TrainOutcome { run_dir: run_dir.to_path_buf(), best_epoch, best_val_cl, rows })
}

fn build_train_map(
    v: &View,
    ds: &Dataset,
    cb: &Codebook,
    crop: usize,
    params: AuMapParams,
) -> Result<Map2, ToolkitError> {
    let expr = Expression::ALL[v.label];
    build_au_map(expr, &v.landmarks, cb, (crop, crop), params)
        .map(|hm| hm.into_map())
        .map_err(|e| ToolkitError::AuMap { id: format!("training sample in {}", ds.class_names[v.label]), source: e })
}

/// Top-1 accuracy over `idx` using deterministic center-crop views.
fn accuracy(net: &mut Network, ds: &Dataset, idx: &[usize], batch: usize) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(batch) {
        let views: Vec<View> = chunk.iter().map(|&i| ds.eval_view(i)).collect();
        let refs: Vec<&View> = views.iter().collect();
        let x = to_input(&refs);
        let pass = net.forward(&x, false, &BTreeSet::new());
        for (pred, v) in pass.predictions().into_iter().zip(&views) {
            correct += usize::from(pred == v.label);
        }
    }
    correct as f64 / idx.len() as f64
}

/// Best epoch by validation accuracy, earliest on ties. 1-based.
pub fn select_best_rows(rows: &[EpochRow]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for r in rows {
        if best.map_or(true, |(_, b)| r.val_cl > b) {
            best = Some((r.epoch, r.val_cl));
        }
    }
    best
}

/// Reads a run directory's metric log and picks the best checkpoint.
pub fn select_best(run_dir: &Path) -> Result<(usize, f64), ToolkitError> {
    let rows = read_metrics(&run_dir.join(METRICS_FILE))?;
    select_best_rows(&rows)
        .ok_or_else(|| ToolkitError::Train(format!("{}: metric log has no epochs", run_dir.display())))
}

pub fn write_metrics(path: &Path, rows: &[EpochRow]) -> Result<(), ToolkitError> {
    let mut out = String::from("epoch,lr,train_ce,train_align,train_total,val_cl\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_ce, r.train_align, r.train_total, r.val_cl
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRow>, ToolkitError> {
    let text = std::fs::read_to_string(path).map_err(|e| ToolkitError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ToolkitError::format(path, format!("row {}: expected 6 fields", i + 1)));
        }
        let num = |j: usize| -> Result<f64, ToolkitError> {
            fields[j]
                .parse()
                .map_err(|_| ToolkitError::format(path, format!("row {}: bad number {:?}", i + 1, fields[j])))
        };
        rows.push(EpochRow {
            epoch: fields[0]
                .parse()
                .map_err(|_| ToolkitError::format(path, format!("row {}: bad epoch", i + 1)))?,
            lr: num(1)?,
            train_ce: num(2)?,
            train_align: num(3)?,
            train_total: num(4)?,
            val_cl: num(5)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn row(epoch: usize, val_cl: f64) -> EpochRow {
        EpochRow { epoch, lr: 0.1, train_ce: 1.0, train_align: 0.5, train_total: 3.0, val_cl }
    }

    #[test]
    fn select_best_takes_argmax_with_earliest_tie() {
        let rows = vec![row(1, 0.5), row(2, 0.7), row(3, 0.6)];
        assert_eq!(select_best_rows(&rows), Some((2, 0.7)));
        let tie = vec![row(1, 0.7), row(2, 0.7)];
        assert_eq!(select_best_rows(&tie), Some((1, 0.7)));
        assert_eq!(select_best_rows(&[row(1, 0.3)]), Some((1, 0.3)));
        assert_eq!(select_best_rows(&[]), None);
    }

    #[test]
    fn metrics_round_trip_and_file_selection() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(1, 0.5), row(2, 0.7), row(3, 0.7)];
        write_metrics(&dir.path().join(METRICS_FILE), &rows).unwrap();
        let back = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back, rows);
        assert_eq!(select_best(dir.path()).unwrap(), (2, 0.7));
        write_metrics(&dir.path().join(METRICS_FILE), &[]).unwrap();
        assert!(select_best(dir.path()).is_err());
    }

    #[test]
    fn lr_schedule_shapes() {
        assert_eq!(schedule_lr("constant", 0.05, 3, 10), 0.05);
        let first = schedule_lr("cosine", 0.05, 1, 10);
        assert!((first - 0.05).abs() < 1e-12, "cosine starts at the base rate");
        let mut prev = first;
        for e in 2..=10 {
            let cur = schedule_lr("cosine", 0.05, e, 10);
            assert!(cur < prev, "cosine decays monotonically");
            prev = cur;
        }
    }

    #[test]
    fn stratified_split_is_seeded_and_disjoint() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (t1, v1) = stratified_split(&labels, 4, 0.2, &mut r1);
        let (t2, v2) = stratified_split(&labels, 4, 0.2, &mut r2);
        assert_eq!((&t1, &v1), (&t2, &v2));
        assert_eq!(v1.len(), 8, "20% of each 10-sample class");
        let mut all: Vec<usize> = t1.iter().chain(&v1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        for class in 0..4 {
            assert_eq!(v1.iter().filter(|&&i| labels[i] == class).count(), 2);
        }
    }

    #[test]
    fn split_never_drains_a_class() {
        let labels = vec![0, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train, val) = stratified_split(&labels, 2, 0.9, &mut rng);
        assert!(train.iter().any(|&i| labels[i] == 0));
        assert!(train.iter().any(|&i| labels[i] == 1));
        assert_eq!(val.len(), 1);
    }

    fn tiny_config(root: &Path, epochs: usize, lambda: f64) -> Config {
        let mut cfg = Config::default();
        cfg.run.seed = 0;
        cfg.data.root = root.to_string_lossy().into_owned();
        cfg.data.resize = 48;
        cfg.data.crop = 40;
        cfg.data.val_fraction = 0.34;
        cfg.model.backbone = "small_cnn".into();
        cfg.train.lambda = lambda;
        cfg.train.aligned_layers = vec!["block4".into()];
        cfg.train.epochs = epochs;
        cfg.train.batch_size = 8;
        cfg.train.lr = 0.01;
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_manifest(dir: &Path) -> DatasetManifest {
        use crate::formats::{load_manifest, Layout, Split};
        let cb = load_codebook(Path::new("default")).unwrap();
        synth::generate(dir, 21, 3, 48, &cb, AuMapParams::default()).unwrap();
        load_manifest(dir, Layout::ManifestFile, Split::Train).unwrap()
    }

    #[test]
    fn unknown_aligned_layer_fails_before_training() {
        let data = tempfile::tempdir().unwrap();
        let run = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(data.path());
        let mut cfg = tiny_config(data.path(), 1, 4.0);
        cfg.train.aligned_layers = vec!["block9".into()];
        let err = train(&cfg, &manifest, &run.path().join("r")).unwrap_err();
        assert!(err.to_string().contains("block9"), "{err}");
        assert!(
            !run.path().join("r").join(CHECKPOINT_DIR).exists(),
            "must fail before any training output"
        );
    }

    #[test]
    fn training_logs_decompose_and_reproduce() {
        let data = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(data.path());
        let cfg = tiny_config(data.path(), 2, 4.0);

        let run_a = tempfile::tempdir().unwrap();
        let out_a = train(&cfg, &manifest, run_a.path()).unwrap();
        assert_eq!(out_a.rows.len(), 2);
        for r in &out_a.rows {
            assert!(
                (r.train_total - (r.train_ce + 4.0 * r.train_align)).abs() < 1e-6,
                "loss decomposition violated: {r:?}"
            );
            assert!(r.train_align > 0.0, "aligned run must log alignment loss");
            assert!(checkpoint_path(run_a.path(), r.epoch).is_file());
        }
        assert!(run_a.path().join("config.toml").is_file());
        assert_eq!(select_best(run_a.path()).unwrap(), (out_a.best_epoch, out_a.best_val_cl));

        let run_b = tempfile::tempdir().unwrap();
        train(&cfg, &manifest, run_b.path()).unwrap();
        let log_a = std::fs::read(run_a.path().join(METRICS_FILE)).unwrap();
        let log_b = std::fs::read(run_b.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log_a, log_b, "same config + seed must produce identical metric logs");
    }

    #[test]
    fn lambda_zero_is_a_vanilla_classifier() {
        let data = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(data.path());
        let cfg = tiny_config(data.path(), 2, 0.0);
        let run = tempfile::tempdir().unwrap();
        let out = train(&cfg, &manifest, run.path()).unwrap();
        for r in &out.rows {
            assert_eq!(r.train_align, 0.0, "no alignment term at lambda 0");
            assert!((r.train_total - r.train_ce).abs() < 1e-12);
        }
    }
}

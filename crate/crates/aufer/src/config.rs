//! Run configuration: TOML files, command-line overrides, snapshots.
//!
//! Precedence is defaults < config file < `--override` flags. Overrides
//! address fields by dotted path (`train.lambda=2`) or by bare key when the
//! key is unique across sections (`lambda=2`); referencing a key that does
//! not exist is an error rather than a silent no-op.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::ToolkitError;
use crate::formats::{self, Layout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunCfg,
    pub data: DataCfg,
    pub codebook: CodebookCfg,
    pub aumap: AumapCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub eval: EvalCfg,
    pub synth: SynthCfg,
    pub ablate: AblateCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunCfg {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunCfg {
    fn default() -> Self {
        RunCfg { seed: 0, out_dir: "runs/latest".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataCfg {
    pub root: String,
    pub layout: Layout,
    /// Short side after the initial resize.
    pub resize: usize,
    /// Square crop fed to the network.
    pub crop: usize,
    /// Random horizontal flips during training (landmarks mirrored to match).
    pub hflip: bool,
    /// Fraction of training samples held out for validation.
    pub val_fraction: f64,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg {
            root: "data/synth".into(),
            layout: Layout::ManifestFile,
            resize: 96,
            crop: 80,
            hflip: false,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookCfg {
    /// File path, or `default` for the embedded codebook.
    pub path: String,
}

impl Default for CodebookCfg {
    fn default() -> Self {
        CodebookCfg { path: "default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AumapCfg {
    /// Background level of the heatmaps, in [0, 1).
    pub floor: f64,
    /// Multiplier on every blob radius.
    pub radius_scale: f64,
    /// Cache directory; empty selects `<data.root>/aumap_cache`.
    pub cache_dir: String,
}

impl Default for AumapCfg {
    fn default() -> Self {
        AumapCfg { floor: 0.02, radius_scale: 1.0, cache_dir: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub backbone: String,
    pub num_classes: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg { backbone: "small_cnn".into(), num_classes: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    /// Alignment strength; zero trains a plain classifier.
    pub lambda: f64,
    /// Tap ids whose attention is pulled toward the heatmaps.
    pub aligned_layers: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `cosine` or `constant`.
    pub schedule: String,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lambda: 4.0,
            aligned_layers: vec!["block4".into()],
            epochs: 12,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: "cosine".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    pub cam_method: String,
    /// Taps scored against the heatmaps; empty selects every tap.
    pub attention_layers: Vec<String>,
    /// Tap reported as the headline alignment score; empty selects the last
    /// attention layer.
    pub primary_layer: String,
    /// Checkpoint to evaluate; empty selects the run's best epoch.
    pub checkpoint: String,
    /// How many per-sample map sets to retain for figures.
    pub retain_per_sample: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            cam_method: "gradcampp".into(),
            attention_layers: Vec::new(),
            primary_layer: String::new(),
            checkpoint: String::new(),
            retain_per_sample: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCfg {
    pub n_per_class: usize,
    /// Square image side of the generated corpus.
    pub size: usize,
}

impl Default for SynthCfg {
    fn default() -> Self {
        SynthCfg { n_per_class: 50, size: 96 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateCfg {
    pub lambda_grid: Vec<f64>,
    pub layer_sets: Vec<Vec<String>>,
}

impl Default for AblateCfg {
    fn default() -> Self {
        AblateCfg {
            lambda_grid: vec![0.0, 1.0, 4.0, 8.0],
            layer_sets: vec![
                vec!["block4".into()],
                vec!["block3".into(), "block4".into()],
                vec!["block2".into(), "block3".into(), "block4".into()],
            ],
        }
    }
}

impl Config {
    /// Loads a config file (or pure defaults when `path` is None) and
    /// applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, ToolkitError> {
        let mut table = toml::Table::try_from(Config::default()).expect("defaults serialize");
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| ToolkitError::io(p, e))?;
            let file: toml::Table = text
                .parse()
                .map_err(|e| ToolkitError::format(p, format!("config parse error: {e}")))?;
            merge_tables(&mut table, &file, "");
        }
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: Config = Value::Table(table).try_into().map_err(|e| ToolkitError::Config {
            field: "<config>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks shared by every command.
    pub fn validate(&self) -> Result<(), ToolkitError> {
        let fail = |field: &str, message: String| -> Result<(), ToolkitError> {
            Err(ToolkitError::Config { field: field.into(), message })
        };
        if self.data.crop == 0 || self.data.resize < self.data.crop {
            return fail(
                "data.crop",
                format!("need 0 < crop <= resize, got crop={} resize={}", self.data.crop, self.data.resize),
            );
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return fail("data.val_fraction", format!("must be in [0, 1), got {}", self.data.val_fraction));
        }
        if !(0.0..1.0).contains(&self.aumap.floor) {
            return fail("aumap.floor", format!("must be in [0, 1), got {}", self.aumap.floor));
        }
        if !(self.aumap.radius_scale > 0.0) || !self.aumap.radius_scale.is_finite() {
            return fail("aumap.radius_scale", format!("must be positive, got {}", self.aumap.radius_scale));
        }
        if self.train.lambda < 0.0 || !self.train.lambda.is_finite() {
            return fail("train.lambda", format!("must be finite and nonnegative, got {}", self.train.lambda));
        }
        if self.train.epochs == 0 {
            return fail("train.epochs", "must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return fail("train.batch_size", "must be at least 1".into());
        }
        if !(self.train.lr > 0.0) {
            return fail("train.lr", format!("must be positive, got {}", self.train.lr));
        }
        if !matches!(self.train.schedule.as_str(), "cosine" | "constant") {
            return fail("train.schedule", format!("must be `cosine` or `constant`, got {:?}", self.train.schedule));
        }
        if self.train.aligned_layers.is_empty() && self.train.lambda > 0.0 {
            return fail("train.aligned_layers", "alignment is on but no layers are listed".into());
        }
        if self.model.num_classes == 0 {
            return fail("model.num_classes", "must be at least 1".into());
        }
        if self.synth.n_per_class == 0 || self.synth.size < 32 {
            return fail("synth", format!("need n_per_class >= 1 and size >= 32, got {} and {}", self.synth.n_per_class, self.synth.size));
        }
        for (i, l) in self.ablate.lambda_grid.iter().enumerate() {
            if *l < 0.0 || !l.is_finite() {
                return fail("ablate.lambda_grid", format!("entry {i} must be finite and nonnegative, got {l}"));
            }
        }
        Ok(())
    }

    /// Writes the effective configuration into `dir/config.toml`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<(), ToolkitError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        formats::write_atomic(&dir.join("config.toml"), text.as_bytes())
    }
}

/// Recursive merge of `src` over `dst`. Unknown sections or keys in `src`
/// are an error so typos never pass silently.
fn merge_tables(dst: &mut toml::Table, src: &toml::Table, prefix: &str) {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(k), v) {
            (Some(Value::Table(dt)), Value::Table(st)) => merge_tables(dt, st, &path),
            (Some(slot), _) => *slot = coerce_like(slot, v.clone()),
            (None, _) => {
                // Leave the unknown key in place; final deserialization
                // rejects it with a field-level error message.
                dst.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Keeps float-typed fields float when an override writes an integer.
fn coerce_like(old: &Value, new: Value) -> Value {
    match (old, &new) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
        (Value::Array(olds), Value::Array(news)) => {
            if let Some(proto) = olds.first() {
                Value::Array(news.iter().map(|n| coerce_like(proto, n.clone())).collect())
            } else {
                new
            }
        }
        _ => new,
    }
}

/// Applies one `key=value` override onto the merged table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ToolkitError> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(ToolkitError::Config {
            field: spec.into(),
            message: "override must look like key=value".into(),
        });
    };
    let key = key.trim();
    let raw = raw.trim();
    let segments: Vec<&str> = key.split('.').collect();

    let (section, field): (String, String) = match segments.as_slice() {
        [field] => {
            // Bare key: must be unique across sections.
            let mut hits = Vec::new();
            for (sec, val) in table.iter() {
                if let Value::Table(t) = val {
                    if t.contains_key(*field) {
                        hits.push(sec.clone());
                    }
                }
            }
            match hits.as_slice() {
                [one] => (one.clone(), (*field).to_string()),
                [] => {
                    return Err(ToolkitError::Config {
                        field: key.into(),
                        message: "no such config key".into(),
                    })
                }
                many => {
                    return Err(ToolkitError::Config {
                        field: key.into(),
                        message: format!(
                            "ambiguous key, qualify as one of: {}",
                            many.iter().map(|s| format!("{s}.{field}")).collect::<Vec<_>>().join(", ")
                        ),
                    })
                }
            }
        }
        [section, field] => ((*section).to_string(), (*field).to_string()),
        _ => {
            return Err(ToolkitError::Config {
                field: key.into(),
                message: "override paths have at most two segments".into(),
            })
        }
    };

    let Some(Value::Table(sec)) = table.get_mut(&section) else {
        return Err(ToolkitError::Config {
            field: key.into(),
            message: format!("no config section named {section:?}"),
        });
    };
    let Some(old) = sec.get(&field) else {
        return Err(ToolkitError::Config {
            field: key.into(),
            message: format!("section {section:?} has no key {field:?}"),
        });
    };

    let parsed = parse_override_value(raw);
    let new = coerce_like(old, parsed);
    sec.insert(field, new);
    Ok(())
}

/// Parses an override value as TOML when possible, else as a string.
fn parse_override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    if let Ok(t) = doc.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    Value::String(raw.to_string())
}

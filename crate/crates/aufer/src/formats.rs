//! File formats: the codebook TOML schema, landmark files, dataset
//! manifests, and the binary heatmap cache.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aufer_core::aumap::AuHeatmap;
use aufer_core::codebook::{Anchor, AuSpec, Codebook, Expression, Laterality};
use aufer_core::landmarks::LandmarkSet;
use aufer_core::map::Map2;
use serde::{Deserialize, Serialize};

use crate::error::ToolkitError;

/// The codebook shipped with the toolkit, embedded at build time.
pub const DEFAULT_CODEBOOK_TOML: &str = include_str!("../assets/codebook.toml");

/// Path value that selects the embedded default codebook.
pub const DEFAULT_CODEBOOK_PATH: &str = "default";

// ---------------------------------------------------------------------------
// Codebook TOML
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CodebookFile {
    #[serde(default)]
    schema: Option<String>,
    expressions: BTreeMap<String, Vec<AuEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AuEntry {
    au: String,
    name: String,
    laterality: String,
    radius_factor: f64,
    /// One anchor per inner list; each pair is `[landmark index, weight]`.
    anchors: Vec<Vec<(usize, f64)>>,
}

/// Parses codebook TOML text. The result is structurally validated; any
/// violations are reported together in the error.
pub fn parse_codebook(text: &str, origin: &Path) -> Result<Codebook, ToolkitError> {
    let file: CodebookFile = toml::from_str(text)
        .map_err(|e| ToolkitError::format(origin, format!("codebook parse error: {e}")))?;
    let mut cb = Codebook::new();
    for (label, entries) in &file.expressions {
        let expr = Expression::parse(label)
            .map_err(|e| ToolkitError::format(origin, e.to_string()))?;
        let mut specs = Vec::with_capacity(entries.len());
        for entry in entries {
            let laterality = Laterality::parse(&entry.laterality).ok_or_else(|| {
                ToolkitError::format(
                    origin,
                    format!("{label}/{}: unknown laterality {:?}", entry.au, entry.laterality),
                )
            })?;
            specs.push(AuSpec {
                au_code: entry.au.clone(),
                name: entry.name.clone(),
                laterality,
                radius_factor: entry.radius_factor,
                anchors: entry.anchors.iter().map(|w| Anchor { weights: w.clone() }).collect(),
            });
        }
        cb.set(expr, specs);
    }
    let violations = cb.validate();
    if !violations.is_empty() {
        let report = violations
            .iter()
            .map(|v| format!("  - {v}"))
            .collect::<Vec<_>>()
            .join("\n");
        return Err(ToolkitError::CodebookInvalid { path: origin.to_path_buf(), report });
    }
    Ok(cb)
}

/// Loads a codebook from a file path, or the embedded default when `path`
/// is `"default"`.
pub fn load_codebook(path: &Path) -> Result<Codebook, ToolkitError> {
    if path.as_os_str() == DEFAULT_CODEBOOK_PATH {
        return parse_codebook(DEFAULT_CODEBOOK_TOML, Path::new(DEFAULT_CODEBOOK_PATH));
    }
    let text = fs::read_to_string(path).map_err(|e| ToolkitError::io(path, e))?;
    parse_codebook(&text, path)
}

/// Serializes a codebook back to the TOML schema.
pub fn codebook_to_toml(cb: &Codebook) -> String {
    let mut expressions = BTreeMap::new();
    for (expr, specs) in cb.iter() {
        let entries: Vec<AuEntry> = specs
            .iter()
            .map(|s| AuEntry {
                au: s.au_code.clone(),
                name: s.name.clone(),
                laterality: s.laterality.label().to_string(),
                radius_factor: s.radius_factor,
                anchors: s.anchors.iter().map(|a| a.weights.clone()).collect(),
            })
            .collect();
        expressions.insert(expr.label().to_string(), entries);
    }
    let file = CodebookFile { schema: Some("au-codebook/v1".to_string()), expressions };
    toml::to_string(&file).expect("codebook serializes")
}

/// Canonical byte digest of the codebook content, for cache keys.
pub fn codebook_hash(cb: &Codebook) -> u64 {
    fnv1a64(codebook_to_toml(cb).as_bytes())
}

// ---------------------------------------------------------------------------
// Landmark files
// ---------------------------------------------------------------------------

pub fn load_landmarks(path: &Path) -> Result<LandmarkSet, ToolkitError> {
    let text = fs::read_to_string(path).map_err(|e| ToolkitError::io(path, e))?;
    LandmarkSet::parse(&text).map_err(|e| ToolkitError::format(path, e.to_string()))
}

pub fn save_landmarks(lm: &LandmarkSet, path: &Path) -> Result<(), ToolkitError> {
    write_atomic(path, lm.to_text().as_bytes())
}

// ---------------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------------

/// Dataset split selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn manifest_name(self) -> &'static str {
        match self {
            Split::Train => "train.manifest",
            Split::Test => "test.manifest",
        }
    }
}

/// How images and landmark files are arranged on disk.
///
/// * `RafdbLike`: `root/<split>/<ClassName>/<id>.png` with `<id>.txt`
///   landmarks next to each image.
/// * `AffectnetLike`: `root/<split>/<class index>/<id>.png`, numeric class
///   directories in canonical label order, landmarks next to images.
/// * `ManifestFile`: `root/<split>.manifest` listing every sample
///   explicitly (the format the synthetic generator writes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    RafdbLike,
    AffectnetLike,
    ManifestFile,
}

/// One dataset sample's paths (relative to the manifest root) and label.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Stable sample id (the image path without extension).
    pub id: String,
    pub image: PathBuf,
    pub label: usize,
    pub landmarks: PathBuf,
}

/// A verified listing of one dataset split.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn label_name(&self, idx: usize) -> &str {
        &self.class_names[idx]
    }

    pub fn image_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.image)
    }

    pub fn landmark_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.landmarks)
    }
}

/// Loads and verifies a dataset split.
///
/// Entries come back sorted by id so downstream seeded shuffles are
/// reproducible. Every referenced image and landmark file is checked for
/// existence; the error lists offending ids.
pub fn load_manifest(root: &Path, layout: Layout, split: Split) -> Result<DatasetManifest, ToolkitError> {
    let manifest = match layout {
        Layout::ManifestFile => load_manifest_file(root, split)?,
        Layout::RafdbLike => scan_class_dirs(root, split, ClassDirNaming::Label)?,
        Layout::AffectnetLike => scan_class_dirs(root, split, ClassDirNaming::Index)?,
    };
    verify_paths(&manifest)?;
    Ok(manifest)
}

fn load_manifest_file(root: &Path, split: Split) -> Result<DatasetManifest, ToolkitError> {
    let path = root.join(split.manifest_name());
    let text = fs::read_to_string(&path).map_err(|e| ToolkitError::io(&path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| ToolkitError::format(&path, "empty manifest"))?;
    let class_names: Vec<String> = {
        let mut fields = header.split('\t');
        let tag = fields.next().unwrap_or_default();
        if tag != "classes:" {
            return Err(ToolkitError::format(
                &path,
                "manifest must start with a `classes:<TAB>name...` header line",
            ));
        }
        fields.map(str::to_string).collect()
    };
    if class_names.is_empty() {
        return Err(ToolkitError::format(&path, "class header lists no classes"));
    }

    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(ToolkitError::format(
                &path,
                format!("row {}: expected image<TAB>label<TAB>landmarks, got {line:?}", i + 2),
            ));
        }
        let label = class_names.iter().position(|c| c == parts[1]).ok_or_else(|| {
            ToolkitError::UnknownLabel { label: parts[1].to_string(), known: class_names.join(", ") }
        })?;
        let image = PathBuf::from(parts[0]);
        entries.push(ManifestEntry {
            id: id_from_rel_path(&image),
            image,
            label,
            landmarks: PathBuf::from(parts[2]),
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest { root: root.to_path_buf(), split, class_names, entries })
}

enum ClassDirNaming {
    /// Directories named by class label (`Anger`, `Happiness`, ...).
    Label,
    /// Directories named by class index (`0`..`6`) in canonical order.
    Index,
}

fn scan_class_dirs(
    root: &Path,
    split: Split,
    naming: ClassDirNaming,
) -> Result<DatasetManifest, ToolkitError> {
    let class_names: Vec<String> =
        Expression::ALL.iter().map(|e| e.label().to_string()).collect();
    let split_dir = root.join(split.dir_name());
    let read = fs::read_dir(&split_dir).map_err(|e| ToolkitError::io(&split_dir, e))?;

    let mut entries = Vec::new();
    let mut dirs: Vec<PathBuf> = read
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(ToolkitError::MissingFiles {
            root: split_dir.clone(),
            listing: "  - no class directories found".to_string(),
        });
    }
    for dir in dirs {
        let dir_name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let label = match naming {
            ClassDirNaming::Label => {
                class_names.iter().position(|c| c.eq_ignore_ascii_case(&dir_name))
            }
            ClassDirNaming::Index => dir_name
                .parse::<usize>()
                .ok()
                .filter(|&i| i < class_names.len()),
        }
        .ok_or_else(|| ToolkitError::UnknownLabel {
            label: dir_name.clone(),
            known: match naming {
                ClassDirNaming::Label => class_names.join(", "),
                ClassDirNaming::Index => "0..=6 (canonical class order)".to_string(),
            },
        })?;

        let files = fs::read_dir(&dir).map_err(|e| ToolkitError::io(&dir, e))?;
        for f in files.filter_map(|f| f.ok().map(|f| f.path())) {
            if f.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let image = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
            let landmarks = image.with_extension("txt");
            entries.push(ManifestEntry { id: id_from_rel_path(&image), image, label, landmarks });
        }
    }
    if entries.is_empty() {
        return Err(ToolkitError::MissingFiles {
            root: split_dir,
            listing: "  - class directories contain no .png images".to_string(),
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest { root: root.to_path_buf(), split, class_names, entries })
}

fn id_from_rel_path(rel: &Path) -> String {
    rel.with_extension("").to_string_lossy().replace('\\', "/")
}

fn verify_paths(m: &DatasetManifest) -> Result<(), ToolkitError> {
    let mut missing = Vec::new();
    for e in &m.entries {
        if !m.image_path(e).is_file() {
            missing.push(format!("  - {} (image {})", e.id, e.image.display()));
        }
        if !m.landmark_path(e).is_file() {
            missing.push(format!("  - {} (landmarks {})", e.id, e.landmarks.display()));
        }
    }
    if missing.is_empty() {
        return Ok(());
    }
    let total = missing.len();
    let mut listing: Vec<String> = missing.into_iter().take(10).collect();
    if total > listing.len() {
        listing.push(format!("  ... and {} more", total - listing.len()));
    }
    Err(ToolkitError::MissingFiles { root: m.root.clone(), listing: listing.join("\n") })
}

/// Writes a manifest file in the `classes:` header + TSV row format.
pub fn save_manifest(m: &DatasetManifest) -> Result<(), ToolkitError> {
    let mut out = String::new();
    out.push_str("classes:");
    for c in &m.class_names {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for e in &m.entries {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.image.display(),
            m.class_names[e.label],
            e.landmarks.display()
        ));
    }
    let path = m.root.join(m.split.manifest_name());
    write_atomic(&path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Heatmap cache
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"AUMC";
const CACHE_VERSION: u8 = 1;

/// Writes one cached heatmap: header `(magic, version, h, w, floor,
/// params_hash)` then row-major `f32` values.
pub fn write_aumap_cache(
    path: &Path,
    hm: &AuHeatmap,
    params_hash: u64,
) -> Result<(), ToolkitError> {
    let (h, w) = hm.shape();
    let mut buf = Vec::with_capacity(25 + 4 * h * w);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.push(CACHE_VERSION);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&hm.floor().to_le_bytes());
    buf.extend_from_slice(&params_hash.to_le_bytes());
    for &v in hm.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Reads a cached heatmap, returning it with the stored params hash.
pub fn read_aumap_cache(path: &Path) -> Result<(AuHeatmap, u64), ToolkitError> {
    let buf = fs::read(path).map_err(|e| ToolkitError::io(path, e))?;
    let fail = |m: &str| ToolkitError::format(path, m.to_string());
    if buf.len() < 29 || &buf[..4] != CACHE_MAGIC {
        return Err(fail("not a heatmap cache file"));
    }
    if buf[4] != CACHE_VERSION {
        return Err(fail("unsupported cache version"));
    }
    let h = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
    let floor = f64::from_le_bytes(buf[13..21].try_into().unwrap());
    let params_hash = u64::from_le_bytes(buf[21..29].try_into().unwrap());
    if h == 0 || w == 0 {
        return Err(fail("cache holds an empty map"));
    }
    let expected = 29 + 4 * h * w;
    if buf.len() != expected {
        return Err(fail("cache payload length disagrees with header"));
    }
    let mut data = Vec::with_capacity(h * w);
    for chunk in buf[29..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok((AuHeatmap::from_parts(Map2::from_vec(h, w, data), floor), params_hash))
}

/// Probes whether a cache file exists and was built with `params_hash`.
pub fn aumap_cache_is_current(path: &Path, params_hash: u64) -> bool {
    match read_aumap_cache(path) {
        Ok((_, stored)) => stored == params_hash,
        Err(_) => false,
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// FNV-1a 64-bit hash; stable across platforms, used for cache keys.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Writes via a temp file in the same directory, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ToolkitError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| ToolkitError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| ToolkitError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| ToolkitError::io(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| ToolkitError::io(path, e))
}

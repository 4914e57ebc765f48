//! Command-line surface: one subcommand per workflow, all driven by a TOML
//! config plus `key=value` overrides.
//!
//! Precedence is file < overrides, with `--seed` and `--out` appended last
//! as `run.seed` / `run.out_dir` overrides. Each command snapshots its
//! effective config into the output directory, so a run is reproducible
//! from the snapshot alone. Exit code 0 means every requested artifact was
//! produced.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablate::{ablate_lambda, ablate_layers, AblationOutcome};
use crate::config::Config;
use crate::error::ToolkitError;
use crate::eval::{evaluate, EvalReport, REPORT_FILE};
use crate::formats::{
    aumap_cache_is_current, codebook_to_toml, fnv1a64, load_codebook, load_manifest,
    write_aumap_cache, Split,
};
use crate::model::Network;
use crate::synth;
use crate::train::{checkpoint_path, select_best, train};
use crate::viz::emit_figures;
use aufer_core::aumap::{build_au_map, AuMapParams};
use aufer_core::codebook::Expression;
use aufer_core::landmarks::LandmarkSet;

#[derive(Parser, Debug)]
#[command(
    name = "aufer",
    version,
    about = "Expression classifiers whose attention is aligned to facial action-unit maps"
)]
pub struct Cli {
    /// TOML config file; omitted means built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; shorthand for --override run.out_dir=DIR.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Config override like train.lambda=4 (repeatable, applied in order).
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; shorthand for --override run.seed=N.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Rasterize and cache an AU heatmap for every manifest image.
    BuildAumaps,
    /// Generate the synthetic expression corpus under data.root.
    Synth,
    /// Train a classifier, optionally aligning attention to AU maps.
    Train,
    /// Evaluate a checkpoint: metrics report plus figures.
    Eval,
    /// One training run per alignment weight on a grid.
    AblateLambda {
        /// Comma-separated weights, e.g. 0,1,4,8 (default: ablate.lambda_grid).
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        grid: Option<Vec<f64>>,
    },
    /// One training run per aligned-layer set.
    AblateLayers {
        /// Sets joined by `;`, layers by `+`, e.g. "block4;block3+block4"
        /// (default: ablate.layer_sets).
        #[arg(long)]
        sets: Option<String>,
    },
    /// Re-render figures from an existing evaluation report.
    Viz {
        /// Report path (default: <out dir>/report.json).
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
}

/// Entry point for the binary: parses argv, runs one command, and turns
/// the outcome into an exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Builds the effective config and runs the requested command.
pub fn dispatch(cli: &Cli) -> Result<(), ToolkitError> {
    let cfg = effective_config(cli)?;
    let out = PathBuf::from(&cfg.run.out_dir);
    match &cli.command {
        Command::BuildAumaps => cmd_build_aumaps(&cfg, &out),
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::Eval => cmd_eval(&cfg, &out),
        Command::AblateLambda { grid } => {
            let grid = grid.clone().unwrap_or_else(|| cfg.ablate.lambda_grid.clone());
            cmd_ablate_lambda(&cfg, &out, &grid)
        }
        Command::AblateLayers { sets } => {
            let sets = match sets {
                Some(s) => parse_layer_sets(s),
                None => cfg.ablate.layer_sets.clone(),
            };
            cmd_ablate_layers(&cfg, &out, &sets)
        }
        Command::Viz { report } => cmd_viz(&cfg, &out, report.as_deref()),
    }
}

/// File config with CLI overrides applied in order; `--seed` and `--out`
/// land last so they win over both.
fn effective_config(cli: &Cli) -> Result<Config, ToolkitError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("run.out_dir={}", out.display()));
    }
    let cfg = Config::load(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits "block4;block3+block4" into layer sets. Empty segments survive
/// as empty sets so validation can reject them explicitly.
pub fn parse_layer_sets(spec: &str) -> Vec<Vec<String>> {
    spec.split(';')
        .map(|set| {
            set.split('+')
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        })
        .collect()
}

fn snapshot_into(cfg: &Config, out: &Path) -> Result<(), ToolkitError> {
    std::fs::create_dir_all(out)
        .map_err(|e| ToolkitError::RunDir { path: out.to_path_buf(), message: e.to_string() })?;
    cfg.write_snapshot(out)
}

// ---------------------------------------------------------------------------
// build-aumaps
// ---------------------------------------------------------------------------

/// Outcome of one cache build over both splits.
#[derive(Debug)]
pub struct CacheReport {
    pub cache_dir: PathBuf,
    pub written: usize,
    pub up_to_date: usize,
    /// `(sample id, message)` for entries that could not be cached.
    pub failures: Vec<(String, String)>,
}

/// Rasterizes AU heatmaps for every image of both splits into the cache
/// directory, skipping entries whose stored params hash is current. The
/// hash covers the codebook, the rasterizer parameters, the frame size,
/// the landmark file text, and the label, so any input change invalidates
/// exactly the affected entries.
pub fn build_aumap_cache(cfg: &Config) -> Result<CacheReport, ToolkitError> {
    let root = Path::new(&cfg.data.root);
    let cb = load_codebook(Path::new(&cfg.codebook.path))?;
    let params = AuMapParams { floor: cfg.aumap.floor, radius_scale: cfg.aumap.radius_scale };
    let cache_dir = if cfg.aumap.cache_dir.is_empty() {
        root.join("aumap_cache")
    } else {
        let p = Path::new(&cfg.aumap.cache_dir);
        if p.is_absolute() { p.to_path_buf() } else { root.join(p) }
    };
    std::fs::create_dir_all(&cache_dir)
        .map_err(|e| ToolkitError::io(&cache_dir, e))?;

    // Shared hash prefix: codebook text, rasterizer params, frame geometry.
    let mut prefix = codebook_to_toml(&cb).into_bytes();
    prefix.extend_from_slice(&params.floor.to_le_bytes());
    prefix.extend_from_slice(&params.radius_scale.to_le_bytes());
    prefix.extend_from_slice(&(cfg.data.resize as u64).to_le_bytes());
    prefix.extend_from_slice(&(cfg.data.crop as u64).to_le_bytes());

    let (resize, crop) = (cfg.data.resize, cfg.data.crop);
    let off = ((resize - crop) / 2) as f64;
    let mut report =
        CacheReport { cache_dir: cache_dir.clone(), written: 0, up_to_date: 0, failures: Vec::new() };
    for split in [Split::Train, Split::Test] {
        let manifest = match load_manifest(root, cfg.data.layout, split) {
            Ok(m) => m,
            Err(e) if split == Split::Test => {
                log::warn!("no test split cached: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        for entry in &manifest.entries {
            let lm_path = manifest.landmark_path(entry);
            let cache_path = cache_dir.join(format!("{}.aumc", entry.id.replace('/', "__")));
            let result = (|| -> Result<bool, ToolkitError> {
                let text = std::fs::read_to_string(&lm_path).map_err(|e| ToolkitError::io(&lm_path, e))?;
                let mut key = prefix.clone();
                key.extend_from_slice(text.as_bytes());
                key.extend_from_slice(manifest.label_name(entry.label).as_bytes());
                let hash = fnv1a64(&key);
                if aumap_cache_is_current(&cache_path, hash) {
                    return Ok(false);
                }
                let to_landmark_err =
                    |e| ToolkitError::Landmark { id: entry.id.clone(), source: e };
                let lm = LandmarkSet::parse(&text)
                    .and_then(|lm| lm.scaled_to((resize, resize)))
                    .and_then(|lm| lm.cropped(off, off, (crop, crop)))
                    .map_err(to_landmark_err)?;
                let hm = build_au_map(Expression::ALL[entry.label], &lm, &cb, (crop, crop), params)
                    .map_err(|e| ToolkitError::AuMap { id: entry.id.clone(), source: e })?;
                write_aumap_cache(&cache_path, &hm, hash)?;
                Ok(true)
            })();
            match result {
                Ok(true) => report.written += 1,
                Ok(false) => report.up_to_date += 1,
                Err(e) => {
                    log::error!("{}: {e}", entry.id);
                    report.failures.push((entry.id.clone(), e.to_string()));
                }
            }
        }
    }
    Ok(report)
}

fn cmd_build_aumaps(cfg: &Config, out: &Path) -> Result<(), ToolkitError> {
    snapshot_into(cfg, out)?;
    let report = build_aumap_cache(cfg)?;
    println!(
        "heatmap cache {}: {} written, {} up to date, {} failed",
        report.cache_dir.display(),
        report.written,
        report.up_to_date,
        report.failures.len()
    );
    if report.failures.is_empty() {
        Ok(())
    } else {
        let ids: Vec<&str> = report.failures.iter().map(|(id, _)| id.as_str()).collect();
        Err(ToolkitError::format(
            &report.cache_dir,
            format!("{} entries failed: {}", ids.len(), ids.join(", ")),
        ))
    }
}

// ---------------------------------------------------------------------------
// synth / train / eval
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: &Config, out: &Path) -> Result<(), ToolkitError> {
    snapshot_into(cfg, out)?;
    let cb = load_codebook(Path::new(&cfg.codebook.path))?;
    let params = AuMapParams { floor: cfg.aumap.floor, radius_scale: cfg.aumap.radius_scale };
    let rep = synth::generate(
        Path::new(&cfg.data.root),
        cfg.run.seed,
        cfg.synth.n_per_class,
        cfg.synth.size,
        &cb,
        params,
    )?;
    println!(
        "synthetic corpus at {}: {} images, {} landmark files, {} train rows, {} test rows",
        cfg.data.root, rep.images, rep.landmark_files, rep.train_rows, rep.test_rows
    );
    Ok(())
}

fn cmd_train(cfg: &Config, out: &Path) -> Result<(), ToolkitError> {
    let manifest = load_manifest(Path::new(&cfg.data.root), cfg.data.layout, Split::Train)?;
    let outcome = train(cfg, &manifest, out)?;
    println!(
        "trained {} epochs in {}: best epoch {} at validation accuracy {:.4}",
        outcome.rows.len(),
        out.display(),
        outcome.best_epoch,
        outcome.best_val_cl
    );
    Ok(())
}

/// Checkpoint selection: an explicit file is used as-is, a directory is
/// resolved through its epoch-selection record, and an empty setting
/// treats the output directory as the training run to evaluate.
fn resolve_checkpoint(cfg: &Config, out: &Path) -> Result<PathBuf, ToolkitError> {
    let spec = cfg.eval.checkpoint.trim();
    let path = if spec.is_empty() { out.to_path_buf() } else { PathBuf::from(spec) };
    if path.is_dir() {
        let (epoch, _) = select_best(&path)?;
        Ok(checkpoint_path(&path, epoch))
    } else {
        Ok(path)
    }
}

fn cmd_eval(cfg: &Config, out: &Path) -> Result<(), ToolkitError> {
    let manifest = load_manifest(Path::new(&cfg.data.root), cfg.data.layout, Split::Test)?;
    let ckpt = resolve_checkpoint(cfg, out)?;
    let mut net = Network::load(&ckpt)?;
    let cb = load_codebook(Path::new(&cfg.codebook.path))?;
    let report = evaluate(&mut net, &manifest, &cb, cfg)?;
    snapshot_into(cfg, out)?;
    report.save(&out.join(REPORT_FILE))?;
    let figures = emit_figures(&report, out)?;
    println!(
        "evaluated {} samples from {}: accuracy {:.4}, attention cosine {:.4} at {}, {} cosine {:.4}; report + {} figures in {}",
        report.evaluated,
        ckpt.display(),
        report.cl,
        report.att_cos,
        report.primary_layer,
        report.cam_method,
        report.cam_cos,
        figures.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablations / viz
// ---------------------------------------------------------------------------

fn print_ablation(res: &AblationOutcome) {
    for row in &res.rows {
        println!(
            "  {:>16}  cl {:.4}  att_cos {:.4}  cam_cos {:.4}",
            row.label, row.cl, row.att_cos, row.cam_cos
        );
    }
    for (label, message) in &res.errors {
        println!("  {label:>16}  FAILED: {message}");
    }
}

fn ablation_manifests(
    cfg: &Config,
) -> Result<(crate::formats::DatasetManifest, crate::formats::DatasetManifest), ToolkitError> {
    let root = Path::new(&cfg.data.root);
    Ok((
        load_manifest(root, cfg.data.layout, Split::Train)?,
        load_manifest(root, cfg.data.layout, Split::Test)?,
    ))
}

fn finish_ablation(res: &AblationOutcome, out: &Path) -> Result<(), ToolkitError> {
    print_ablation(res);
    if res.all_cells_succeeded() {
        Ok(())
    } else {
        Err(ToolkitError::format(
            out,
            format!("{} of {} grid cells failed", res.errors.len(), res.errors.len() + res.rows.len()),
        ))
    }
}

fn cmd_ablate_lambda(cfg: &Config, out: &Path, grid: &[f64]) -> Result<(), ToolkitError> {
    let (train_m, test_m) = ablation_manifests(cfg)?;
    snapshot_into(cfg, out)?;
    let res = ablate_lambda(cfg, &train_m, &test_m, grid, out)?;
    println!("alignment weight sweep over {grid:?}:");
    finish_ablation(&res, out)
}

fn cmd_ablate_layers(cfg: &Config, out: &Path, sets: &[Vec<String>]) -> Result<(), ToolkitError> {
    let (train_m, test_m) = ablation_manifests(cfg)?;
    let res = ablate_layers(cfg, &train_m, &test_m, sets, out)?;
    snapshot_into(cfg, out)?;
    println!("aligned-layer sweep over {} sets:", sets.len());
    finish_ablation(&res, out)
}

fn cmd_viz(cfg: &Config, out: &Path, report: Option<&Path>) -> Result<(), ToolkitError> {
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| out.join(REPORT_FILE));
    let rep = EvalReport::load(&report_path)?;
    let figures = emit_figures(&rep, out)?;
    // Keep an existing run snapshot: it documents the run that produced
    // the report, which re-rendering must not overwrite.
    if !out.join("config.toml").exists() {
        snapshot_into(cfg, out)?;
    }
    println!("{} figures rendered from {} into {}", figures.len(), report_path.display(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).expect("argv parses")
    }

    #[test]
    fn seed_and_out_become_trailing_overrides() {
        let cli = parse(&[
            "aufer", "train", "--override", "train.lambda=2", "--seed", "7", "--out", "runs/x",
        ]);
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.out_dir, "runs/x");
        assert_eq!(cfg.train.lambda, 2.0);
    }

    #[test]
    fn seed_flag_wins_over_an_earlier_override() {
        let cli = parse(&["aufer", "train", "--override", "run.seed=3", "--seed", "9"]);
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.run.seed, 9);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let cli = parse(&["aufer", "train", "--override", "train.gamma=1"]);
        let err = effective_config(&cli).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn grid_flag_parses_comma_separated_values() {
        let cli = parse(&["aufer", "ablate-lambda", "--grid", "0,1,4,8"]);
        match &cli.command {
            Command::AblateLambda { grid } => assert_eq!(grid.as_deref(), Some(&[0.0, 1.0, 4.0, 8.0][..])),
            other => panic!("wrong command {other:?}"),
        }
    }

    #[test]
    fn layer_set_spec_parses_plus_and_semicolon() {
        let sets = parse_layer_sets("block4; block3+block4");
        assert_eq!(sets, vec![vec!["block4".to_string()], vec!["block3".into(), "block4".into()]]);
        // Empty segments survive as empty sets for validation to reject.
        let sets = parse_layer_sets("block4;;block2");
        assert_eq!(sets.len(), 3);
        assert!(sets[1].is_empty());
    }
}

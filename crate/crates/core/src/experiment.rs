//! Runs an [`ExperimentConfig`] end to end: data, split, training, outputs.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::data::{load_or_generate, make_split, Dataset, SplitManifest};
use crate::error::{GctError, Result};
use crate::maps::GrayMap;
use crate::metrics::{dump_flawmaps, FlawDumpEntry, RunReport};
use crate::models::Checkpoint;
use crate::nn::ForwardMode;
use crate::trainer::{evaluate, fit, flaw_targets, FitOutcome, GctConfig, RunOutput, TrainData, TrainState};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const SPLIT_FILE: &str = "split.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Training and validation sets of `cfg`, read from the cache when one is
/// configured.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let cache = cfg.data.cache_dir.as_deref();
    Ok((
        load_or_generate(&cfg.train_spec(), cache)?,
        load_or_generate(&cfg.val_spec(), cache)?,
    ))
}

pub fn split_for(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    let seeds = crate::trainer::SeedSet::derive(cfg.seed);
    make_split(&cfg.train_spec().name(), cfg.data.train_count, cfg.ratio, seeds.split)
}

/// Everything [`fit`] needs for `cfg`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(GctConfig, TrainData)> {
    cfg.validate()?;
    let (train, val) = load_datasets(cfg)?;
    let manifest = split_for(cfg)?;
    let gct = cfg.gct_config(&manifest)?;
    Ok((gct, TrainData { train, val, manifest }))
}

/// Trains `cfg`. With `dir` set, the run directory receives the config
/// snapshot, split manifest, per-epoch log, checkpoints and report.
pub fn run(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<FitOutcome> {
    let (gct, data) = prepare(cfg)?;
    let out = dir.map(|d| RunOutput {
        dir: d.to_path_buf(),
        run_id: cfg.run_id(),
        ratio: cfg.ratio.to_string(),
        seed: cfg.seed,
        snapshot: Some(cfg.to_toml()),
    });
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| GctError::io(d, e))?;
        data.manifest.save(&d.join(SPLIT_FILE))?;
    }
    fit(&gct, &data, out.as_ref())
}

/// Configuration stored in a run directory.
pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    let path = dir.join(SNAPSHOT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| GctError::io(&path, e))?;
    ExperimentConfig::from_toml(&text)
}

/// Rebuilds the models of a finished run from one of its checkpoints.
pub fn restore_run(dir: &Path, checkpoint: Option<&Path>) -> Result<(ExperimentConfig, GctConfig, TrainData, TrainState)> {
    let cfg = load_run_config(dir)?;
    let (gct, data) = prepare(&cfg)?;
    let mut state = TrainState::new(&gct)?;
    let ck_path: PathBuf = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join(BEST_CHECKPOINT));
    state.restore(&Checkpoint::load(&ck_path)?)?;
    Ok((cfg, gct, data, state))
}

/// Validation metric of a stored run.
pub fn evaluate_run(dir: &Path, checkpoint: Option<&Path>) -> Result<f64> {
    let (_, gct, data, state) = restore_run(dir, checkpoint)?;
    evaluate(state.eval_model(&gct), &data.val, gct.task.metric)
}

/// Writes predicted and ground-truth flaw maps of the first `count`
/// validation images for each task model of a run with a flaw detector.
pub fn dump_run_flawmaps(dir: &Path, out: &Path, count: usize) -> Result<Vec<PathBuf>> {
    let (_, gct, data, state) = restore_run(dir, None)?;
    let flaw = state
        .flaw
        .as_ref()
        .ok_or_else(|| GctError::input(format!("{} has no flaw detector", gct.method.id())))?;
    let samples: Vec<_> = data.val.samples.iter().take(count).cloned().collect();
    if samples.is_empty() {
        return Err(GctError::input("no validation samples to dump"));
    }
    let dtype = candle_core::DType::F32;
    let x = crate::data::stack_images(&samples, dtype)?;
    let (h, w, _) = samples[0].image.shape();
    let labels = samples
        .iter()
        .map(|s| {
            s.label
                .as_ref()
                .ok_or_else(|| GctError::input("validation samples must be labeled"))?
                .to_pixel_map(h, w)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut models = vec![state.t1.as_ref()];
    if let Some(t2) = &state.t2 {
        models.push(t2.as_ref());
    }
    let mut entries = Vec::new();
    for (k, model) in models.into_iter().enumerate() {
        let pred = model.forward(&x, ForwardMode::Eval)?.map;
        let prob = flaw.probability(&x, &pred, ForwardMode::Eval)?;
        let predicted = GrayMap::unstack(&prob)?;
        let targets = flaw_targets(&gct, &pred, &labels)?;
        for (i, (p, t)) in predicted.into_iter().zip(targets).enumerate() {
            entries.push(FlawDumpEntry {
                sample: samples[i].id as usize,
                model: k + 1,
                predicted: p,
                target: t,
            });
        }
    }
    dump_flawmaps(out, &entries)
}

/// Reads `report.json` from each run directory, or from every direct
/// subdirectory that has one.
pub fn collect_reports(dirs: &[PathBuf]) -> Result<Vec<RunReport>> {
    let mut found = Vec::new();
    for d in dirs {
        let direct = d.join("report.json");
        if direct.is_file() {
            found.push(direct);
            continue;
        }
        let mut nested: Vec<PathBuf> = std::fs::read_dir(d)
            .map_err(|e| GctError::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
            .filter(|p| p.is_file())
            .collect();
        if nested.is_empty() {
            return Err(GctError::input(format!("no report.json under {}", d.display())));
        }
        nested.sort();
        found.extend(nested);
    }
    found.iter().map(|p| RunReport::load(p)).collect()
}

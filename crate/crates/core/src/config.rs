//! Experiment configuration: presets, layering of preset, file and command
//! line values, and translation into a training configuration.
//!
//! Layers are merged as TOML tables, later layers winning key by key:
//! task defaults, then the named preset, then the config file, then
//! `key.path=value` overrides. The merged table is parsed strictly, so a
//! misspelt key anywhere is an error.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
pub use toml::Table;
use toml::Value;

use crate::constraints::SslWeights;
use crate::data::{AugmentOp, DatasetSpec, Ratio, SplitManifest, SynthKind};
use crate::error::{GctError, Result};
use crate::flawmap::PipelineParams;
use crate::models::{FlawDetectorArch, TaskSpec};
use crate::nn::AdamConfig;
use crate::trainer::{GctConfig, LrSchedule, Method, MtConfig, OptimConfig, SeedSet};

pub const SCHEMA_VERSION: u32 = 1;

/// Set to `1` to force single-threaded, bit-reproducible execution.
pub const DETERMINISTIC_ENV: &str = "GCT_DETERMINISTIC";

/// True when [`DETERMINISTIC_ENV`] is set to a truthy value.
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV)
        .map(|v| matches!(v.trim(), "1" | "true" | "yes" | "on"))
        .unwrap_or(false)
}

/// Pins the CPU backend to one thread. Must run before any tensor work.
pub fn enable_deterministic_mode() {
    // SAFETY: called at startup, before any other thread exists.
    unsafe { std::env::set_var("RAYON_NUM_THREADS", "1") };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "synth_seg")]
    SynthSeg,
    #[serde(rename = "synth_denoise")]
    SynthDenoise,
}

impl TaskId {
    pub fn id(self) -> &'static str {
        match self {
            TaskId::SynthSeg => "synth_seg",
            TaskId::SynthDenoise => "synth_denoise",
        }
    }

    pub fn default_preset(self) -> &'static str {
        match self {
            TaskId::SynthSeg => "seg_preset",
            TaskId::SynthDenoise => "denoise_preset",
        }
    }
}

impl std::str::FromStr for TaskId {
    type Err = GctError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth_seg" => Ok(TaskId::SynthSeg),
            "synth_denoise" => Ok(TaskId::SynthDenoise),
            other => Err(GctError::config("task", format!("unknown task `{other}` (synth_seg, synth_denoise)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub size: usize,
    /// Segmentation only.
    pub classes: usize,
    /// Denoising only.
    pub noise_sigma: f64,
    pub train_seed: u64,
    pub val_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Epochs `S` of fully supervised training. Supervised runs on a labeled
    /// subset reuse `S`; mixed-batch runs get as many epochs as it takes to
    /// match the fully supervised sample count.
    pub supervised_epochs: u32,
    /// Fixed epoch count that bypasses the sample-count rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    /// Batch size `b`, shared by every method.
    pub batch_size: usize,
    /// Labeled share of a mixed batch; half of `batch_size` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_batch: Option<usize>,
    pub task_lr: f64,
    pub flaw_lr: f64,
    pub schedule: LrSchedule,
    pub augment: Vec<AugmentOp>,
    pub eval_model: u8,
    pub checkpoint_every: u32,
}

/// A complete, validated description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub preset: String,
    pub method: Method,
    pub task: TaskId,
    pub ratio: Ratio,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub ssl: SslWeights,
    pub pipeline: PipelineParams,
    pub mt: MtConfig,
    pub flaw_detector: FlawDetectorArch,
    pub models: ModelsConfig,
}

/// Task network sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    /// Channel widths per resolution level, finest first.
    pub widths: Vec<usize>,
    /// Widths of the second GCT task model when it should differ from the first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths2: Option<Vec<usize>>,
}

fn table(v: impl Serialize) -> Table {
    Table::try_from(v).expect("config types serialise to tables")
}

/// Values every run starts from before the preset is applied.
pub fn task_defaults(task: TaskId) -> Table {
    let data = DataConfig {
        train_count: 256,
        val_count: 128,
        size: 32,
        classes: 4,
        noise_sigma: 0.1,
        train_seed: 100,
        val_seed: 200,
        cache_dir: None,
    };
    let training = TrainingConfig {
        supervised_epochs: 20,
        epochs: None,
        batch_size: 8,
        labeled_batch: None,
        task_lr: 1e-3,
        flaw_lr: 1e-4,
        schedule: LrSchedule::Constant,
        augment: vec![AugmentOp::Hflip],
        eval_model: 1,
        checkpoint_every: 0,
    };
    let mut t = Table::new();
    t.insert("schema_version".into(), Value::Integer(SCHEMA_VERSION as i64));
    t.insert("preset".into(), Value::String(task.default_preset().into()));
    t.insert("method".into(), Value::String(Method::Gct.id().into()));
    t.insert("task".into(), Value::String(task.id().into()));
    t.insert("ratio".into(), Value::String("1/8".into()));
    t.insert("seed".into(), Value::Integer(1));
    t.insert("output_dir".into(), Value::String("runs".into()));
    t.insert("data".into(), Value::Table(table(&data)));
    t.insert("training".into(), Value::Table(table(&training)));
    t.insert("flaw_detector".into(), Value::Table(table(FlawDetectorArch::desk())));
    let models = ModelsConfig {
        widths: TaskSpec::segmentation(3, 4).widths,
        widths2: None,
    };
    t.insert("models".into(), Value::Table(table(models)));
    t
}

/// Hyperparameter fragment of a named preset.
pub fn load_preset(name: &str) -> Result<Table> {
    let (ssl, mt, pipeline) = match name {
        "seg_preset" => (
            SslWeights {
                lambda_fc: 1.0,
                lambda_dc: 100.0,
                eta: 3,
                xi: 0.6,
            },
            MtConfig {
                lambda: 1.0,
                alpha: 0.99,
                eta: 3,
            },
            PipelineParams::segmentation(),
        ),
        "denoise_preset" => (
            SslWeights {
                lambda_fc: 0.1,
                lambda_dc: 1.0,
                eta: 5,
                xi: 0.6,
            },
            MtConfig {
                lambda: 1.0,
                alpha: 0.99,
                eta: 5,
            },
            PipelineParams::channel_mean(3),
        ),
        other => {
            return Err(GctError::config(
                "preset",
                format!("unknown preset `{other}` (seg_preset, denoise_preset)"),
            ))
        }
    };
    let mut t = Table::new();
    t.insert("ssl".into(), Value::Table(table(ssl)));
    t.insert("mt".into(), Value::Table(table(mt)));
    t.insert("pipeline".into(), Value::Table(table(pipeline)));
    Ok(t)
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is
/// replaced.
pub fn merge(base: &mut Table, top: &Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parses `a.b.c=value` into a one-entry nested table. The value is read as
/// a TOML literal, falling back to a bare string.
pub fn parse_override(spec: &str) -> Result<Table> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| GctError::config("override", format!("`{spec}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(GctError::config("override", format!("`{path}` is not a valid key path")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut node = value;
    for k in keys.iter().rev() {
        let mut t = Table::new();
        t.insert((*k).to_string(), node);
        node = Value::Table(t);
    }
    match node {
        Value::Table(t) => Ok(t),
        _ => unreachable!("wrapped in at least one table"),
    }
}

fn lookup<'a>(layers: &[&'a Table], key: &str) -> Option<&'a Value> {
    layers.iter().rev().find_map(|t| t.get(key))
}

impl ExperimentConfig {
    /// Builds a configuration from an optional config file body and
    /// overrides, applied in that order over the task defaults and preset.
    pub fn resolve(file: Option<&str>, overrides: &[Table]) -> Result<Self> {
        let file: Table = match file {
            Some(text) => text
                .parse()
                .map_err(|e: toml::de::Error| GctError::config("config file", e.message().to_string()))?,
            None => Table::new(),
        };
        let mut upper = vec![&file];
        upper.extend(overrides.iter());
        let task: TaskId = match lookup(&upper, "task") {
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(GctError::config("task", "must be a string")),
            None => TaskId::SynthSeg,
        };
        let preset = match lookup(&upper, "preset") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(GctError::config("preset", "must be a string")),
            None => task.default_preset().to_string(),
        };
        let mut merged = task_defaults(task);
        merge(&mut merged, &load_preset(&preset)?);
        for layer in upper {
            merge(&mut merged, layer);
        }
        let cfg: ExperimentConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| GctError::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| GctError::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(GctError::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        let d = &self.data;
        if d.train_count == 0 || d.val_count == 0 {
            return Err(GctError::config("data", "train_count and val_count must be >= 1"));
        }
        if d.size % self.task_spec().size_multiple() != 0 {
            return Err(GctError::config(
                "data.size",
                format!("must be a multiple of {}", self.task_spec().size_multiple()),
            ));
        }
        if !(d.noise_sigma.is_finite() && d.noise_sigma >= 0.0) {
            return Err(GctError::config("data.noise_sigma", "must be >= 0"));
        }
        let t = &self.training;
        if t.supervised_epochs == 0 || t.epochs == Some(0) {
            return Err(GctError::config("training.epochs", "must be >= 1"));
        }
        if t.batch_size == 0 {
            return Err(GctError::config("training.batch_size", "must be >= 1"));
        }
        if self.method != Method::SupOnly {
            let bl = self.labeled_batch();
            if bl == 0 || bl >= t.batch_size {
                return Err(GctError::config(
                    "training.labeled_batch",
                    format!("must lie in [1, {}), got {bl}", t.batch_size),
                ));
            }
        }
        for (field, lr) in [("training.task_lr", t.task_lr), ("training.flaw_lr", t.flaw_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(GctError::config(field, format!("must be > 0, got {lr}")));
            }
        }
        self.ssl.validate().map_err(|e| match e {
            GctError::InvalidConfig { field, message } => GctError::InvalidConfig {
                field: format!("ssl.{field}"),
                message,
            },
            other => other,
        })?;
        self.pipeline.validate()?;
        self.mt.validate()?;
        self.flaw_detector.validate()?;
        self.task_spec().validate()?;
        if let Some(t2) = self.task2_spec() {
            if self.method != Method::Gct {
                return Err(GctError::config("models.widths2", "only GCT trains a second task model"));
            }
            t2.validate().map_err(|_| GctError::config("models.widths2", "need at least two positive widths"))?;
            if self.data.size % t2.size_multiple() != 0 {
                return Err(GctError::config(
                    "models.widths2",
                    format!("data.size {} is not a multiple of {}", self.data.size, t2.size_multiple()),
                ));
            }
        }
        Ok(())
    }

    fn labeled_batch(&self) -> usize {
        self.training.labeled_batch.unwrap_or(self.training.batch_size / 2)
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut spec = match self.task {
            TaskId::SynthSeg => TaskSpec::segmentation(3, self.data.classes),
            TaskId::SynthDenoise => TaskSpec::denoising(3),
        };
        spec.widths = self.models.widths.clone();
        spec
    }

    /// Spec of the second task model when its widths differ.
    pub fn task2_spec(&self) -> Option<TaskSpec> {
        self.models.widths2.as_ref().map(|w| TaskSpec {
            widths: w.clone(),
            ..self.task_spec()
        })
    }

    pub fn train_spec(&self) -> DatasetSpec {
        self.dataset_spec(self.data.train_count, self.data.train_seed)
    }

    pub fn val_spec(&self) -> DatasetSpec {
        self.dataset_spec(self.data.val_count, self.data.val_seed)
    }

    fn dataset_spec(&self, count: usize, seed: u64) -> DatasetSpec {
        let kind = match self.task {
            TaskId::SynthSeg => SynthKind::Segmentation {
                classes: self.data.classes,
            },
            TaskId::SynthDenoise => SynthKind::Denoising {
                noise_sigma: self.data.noise_sigma,
            },
        };
        DatasetSpec {
            kind,
            count,
            size: self.data.size,
            seed,
        }
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}_{}_r{}-{}_s{}",
            self.task.id(),
            self.method.id(),
            self.ratio.num,
            self.ratio.den,
            self.seed
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    /// Epoch count under the sample-count rule, unless fixed explicitly.
    ///
    /// With `S` fully supervised epochs over `D` images the reference budget
    /// is `N = S * ceil(D / b) * b`. Supervised runs on a subset keep `S`.
    /// Mixed-batch runs, whose epoch is one pass over the unlabeled subset,
    /// take `round(N / (ceil(U / b_u) * b))` epochs, at least one.
    pub fn epochs_for(&self, manifest: &SplitManifest) -> u32 {
        if let Some(e) = self.training.epochs {
            return e;
        }
        let s = self.training.supervised_epochs as u64;
        if self.method == Method::SupOnly {
            return s as u32;
        }
        let b = self.training.batch_size as u64;
        let n_full = s * (manifest.total as u64).div_ceil(b) * b;
        let b_u = b - self.labeled_batch() as u64;
        let per_epoch = (manifest.unlabeled_ids.len() as u64).div_ceil(b_u) * b;
        ((n_full as f64 / per_epoch as f64).round() as u32).max(1)
    }

    /// Training configuration for a run on `manifest`.
    pub fn gct_config(&self, manifest: &SplitManifest) -> Result<GctConfig> {
        if self.method != Method::SupOnly && manifest.unlabeled_ids.is_empty() {
            return Err(GctError::config(
                "ratio",
                format!("{} needs unlabeled data; use a ratio below 1", self.method.id()),
            ));
        }
        let t = &self.training;
        let (labeled_batch, unlabeled_batch) = match self.method {
            Method::SupOnly => (t.batch_size, 0),
            _ => (self.labeled_batch(), t.batch_size - self.labeled_batch()),
        };
        let optim = |lr: f64| OptimConfig {
            adam: AdamConfig::with_lr(lr),
            schedule: t.schedule,
        };
        let cfg = GctConfig {
            method: self.method,
            task: self.task_spec(),
            task2: self.task2_spec(),
            weights: self.ssl,
            pipeline: self.pipeline,
            mt: self.mt,
            flaw_arch: self.flaw_detector.clone(),
            task_optim: optim(t.task_lr),
            flaw_optim: optim(t.flaw_lr),
            epochs: self.epochs_for(manifest),
            labeled_batch,
            unlabeled_batch,
            augment: t.augment.clone(),
            seeds: SeedSet::derive(self.seed),
            eval_model: t.eval_model,
            checkpoint_every: t.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

//! Alternating two-step training for GCT plus the shared run loop used by
//! every method.

mod steps;

pub(crate) use steps::{all_inputs, all_outputs};

pub use steps::{
    flaw_targets, supervised_loss, supervised_step, train_step_flaw, train_step_tasks, FlawStepLosses, TaskStepLosses,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{cosine_rampup, SslWeights};
use crate::data::{
    augment, compose_batches, stack_images, stack_targets, supervised_batches, AugmentOp, Dataset, Sample,
    SplitManifest, TargetBatch,
};
use crate::error::{GctError, Result};
use crate::flawmap::PipelineParams;
use crate::maps::PixelMap;
use crate::metrics::{miou, psnr_slices, ConfusionMatrix, EpochRecord, MetricId, RunReport};
use crate::models::{build_task_model, Checkpoint, FlawDetector, FlawDetectorArch, TaskModel, TaskSpec};
use crate::nn::{Adam, AdamConfig, ForwardMode};

/// Training method of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gct")]
    Gct,
    #[serde(rename = "suponly")]
    SupOnly,
    #[serde(rename = "mt")]
    MeanTeacher,
    #[serde(rename = "mt_flawgated")]
    FlawGatedMt,
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::Gct => "gct",
            Method::SupOnly => "suponly",
            Method::MeanTeacher => "mt",
            Method::FlawGatedMt => "mt_flawgated",
        }
    }

    pub fn uses_flaw_detector(self) -> bool {
        matches!(self, Method::Gct | Method::FlawGatedMt)
    }
}

impl std::str::FromStr for Method {
    type Err = GctError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gct" => Ok(Method::Gct),
            "suponly" | "sup_only" => Ok(Method::SupOnly),
            "mt" | "mean_teacher" => Ok(Method::MeanTeacher),
            "mt_flawgated" | "flaw_gated_mt" => Ok(Method::FlawGatedMt),
            other => Err(GctError::config(
                "method",
                format!("unknown method `{other}` (gct, suponly, mt, mt_flawgated)"),
            )),
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - step / total_steps) ^ power`.
    Poly { power: f64 },
}

impl LrSchedule {
    pub fn factor(self, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Poly { power } => {
                let t = if total == 0 { 0.0 } else { step as f64 / total as f64 };
                (1.0 - t).max(0.0).powf(power)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
}

impl OptimConfig {
    pub fn constant(lr: f64) -> Self {
        Self {
            adam: AdamConfig::with_lr(lr),
            schedule: LrSchedule::Constant,
        }
    }
}

/// Mean Teacher settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtConfig {
    pub lambda: f64,
    /// EMA decay of the teacher.
    pub alpha: f64,
    pub eta: u32,
}

impl MtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(GctError::config("mt.lambda", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(GctError::config("mt.alpha", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Independent seeds for every random component of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSet {
    pub split: u64,
    pub model1: u64,
    pub model2: u64,
    pub flaw: u64,
    pub order: u64,
    pub augment: u64,
}

impl SeedSet {
    /// Component `i` takes the first word of a ChaCha8 stream `i` keyed by
    /// `global`, in the field order above.
    pub fn derive(global: u64) -> Self {
        let word = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(global);
            rng.set_stream(stream);
            rng.next_u64()
        };
        Self {
            split: word(0),
            model1: word(1),
            model2: word(2),
            flaw: word(3),
            order: word(4),
            augment: word(5),
        }
    }
}

/// Everything a training run needs apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GctConfig {
    pub method: Method,
    pub task: TaskSpec,
    /// Second GCT task model, when it differs from `task` in size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task2: Option<TaskSpec>,
    pub weights: SslWeights,
    pub pipeline: PipelineParams,
    pub mt: MtConfig,
    pub flaw_arch: FlawDetectorArch,
    pub task_optim: OptimConfig,
    pub flaw_optim: OptimConfig,
    /// Epochs `S`; for mixed batches one epoch visits the unlabeled set once.
    pub epochs: u32,
    /// Labeled part of a mixed batch, or the whole batch for supervised runs.
    pub labeled_batch: usize,
    /// Unlabeled part of a mixed batch.
    pub unlabeled_batch: usize,
    pub augment: Vec<AugmentOp>,
    pub seeds: SeedSet,
    /// Which task model is validated and reported, 1 or 2.
    pub eval_model: u8,
    /// Write `epoch_{e}.ckpt` every this many epochs; 0 keeps only `best.ckpt`.
    pub checkpoint_every: u32,
}

impl GctConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if let Some(t2) = &self.task2 {
            t2.validate()?;
            if self.method != Method::Gct {
                return Err(GctError::config("task2", "only GCT trains a second task model"));
            }
            let same_io = TaskSpec {
                widths: self.task.widths.clone(),
                ..t2.clone()
            };
            if same_io != self.task {
                return Err(GctError::config("task2", "both task models must share inputs, outputs and criterion"));
            }
        }
        self.weights.validate()?;
        self.pipeline.validate()?;
        self.mt.validate()?;
        self.flaw_arch.validate()?;
        for (name, o) in [("task_optim", &self.task_optim), ("flaw_optim", &self.flaw_optim)] {
            if !(o.adam.lr.is_finite() && o.adam.lr > 0.0) {
                return Err(GctError::config(format!("{name}.lr"), "must be > 0"));
            }
        }
        if self.epochs == 0 {
            return Err(GctError::config("epochs", "must be >= 1"));
        }
        if self.labeled_batch == 0 {
            return Err(GctError::config("labeled_batch", "must be >= 1"));
        }
        if self.method != Method::SupOnly && self.unlabeled_batch == 0 {
            return Err(GctError::config("unlabeled_batch", "mixed batches need >= 1 unlabeled sample"));
        }
        if !matches!(self.eval_model, 1 | 2) {
            return Err(GctError::config("eval_model", "must be 1 or 2"));
        }
        if self.method == Method::SupOnly && self.eval_model != 1 {
            return Err(GctError::config("eval_model", "supervised runs train a single model"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        match self.method {
            Method::SupOnly => self.labeled_batch,
            _ => self.labeled_batch + self.unlabeled_batch,
        }
    }

    /// Mixed-batch iterations per epoch.
    pub fn steps_per_epoch(&self, manifest: &SplitManifest) -> usize {
        match self.method {
            Method::SupOnly => manifest.labeled_ids.len().div_ceil(self.labeled_batch),
            _ => manifest.unlabeled_ids.len().div_ceil(self.unlabeled_batch),
        }
    }
}

/// Training data of a run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub val: Dataset,
    pub manifest: SplitManifest,
}

/// Models, optimizers and counters of a run in progress.
pub struct TrainState {
    pub epoch: u32,
    pub step: u64,
    pub samples_seen: u64,
    pub rampup: f64,
    pub t1: Box<dyn TaskModel>,
    /// Second task model, or the EMA teacher for Mean Teacher runs.
    pub t2: Option<Box<dyn TaskModel>>,
    pub flaw: Option<FlawDetector>,
    pub opt1: Adam,
    pub opt2: Option<Adam>,
    pub opt_f: Option<Adam>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &GctConfig) -> Result<Self> {
        cfg.validate()?;
        let t1 = build_task_model(&cfg.task, cfg.seeds.model1)?;
        let opt1 = Adam::new(t1.params().params(), cfg.task_optim.adam)?;
        let (t2, opt2) = match cfg.method {
            Method::SupOnly => (None, None),
            Method::Gct => {
                let t2 = build_task_model(cfg.task2.as_ref().unwrap_or(&cfg.task), cfg.seeds.model2)?;
                let opt = Adam::new(t2.params().params(), cfg.task_optim.adam)?;
                (Some(t2), Some(opt))
            }
            Method::MeanTeacher | Method::FlawGatedMt => {
                let teacher = build_task_model(&cfg.task, cfg.seeds.model1)?;
                teacher.params().copy_from(t1.params())?;
                (Some(teacher), None)
            }
        };
        let (flaw, opt_f) = if cfg.method.uses_flaw_detector() {
            let f = FlawDetector::new(
                cfg.flaw_arch.clone(),
                cfg.task.in_channels,
                cfg.task.out_channels,
                cfg.seeds.flaw,
            )?;
            let opt = Adam::new(f.params().params(), cfg.flaw_optim.adam)?;
            (Some(f), Some(opt))
        } else {
            (None, None)
        };
        Ok(Self {
            epoch: 0,
            step: 0,
            samples_seen: 0,
            rampup: 0.0,
            t1,
            t2,
            flaw,
            opt1,
            opt2,
            opt_f,
            history: Vec::new(),
        })
    }

    /// The model that is validated and deployed.
    pub fn eval_model(&self, cfg: &GctConfig) -> &dyn TaskModel {
        match (cfg.eval_model, &self.t2) {
            (2, Some(t2)) => t2.as_ref(),
            _ => self.t1.as_ref(),
        }
    }

    pub fn checkpoint(&self, cfg: &GctConfig) -> Result<Checkpoint> {
        let spec = serde_json::to_string(cfg).map_err(|e| GctError::input(e.to_string()))?;
        let mut ck = Checkpoint::new(cfg.seeds.model1, self.step, spec);
        ck.add_store("t1", self.t1.params())?;
        if let Some(t2) = &self.t2 {
            ck.add_store("t2", t2.params())?;
        }
        if let Some(f) = &self.flaw {
            ck.add_store("flaw", f.params())?;
        }
        Ok(ck)
    }

    /// Loads network weights from a checkpoint. Optimizer moments are not saved.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_store("t1", self.t1.params())?;
        if let Some(t2) = &self.t2 {
            ck.restore_store("t2", t2.params())?;
        }
        if let Some(f) = &self.flaw {
            ck.restore_store("flaw", f.params())?;
        }
        self.step = ck.step;
        Ok(())
    }
}

/// Tensors of one batch.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub labeled_ids: Vec<u64>,
    pub unlabeled_ids: Vec<u64>,
    pub x_l: Tensor,
    pub y_l: TargetBatch,
    /// Labels in prediction layout, for the flaw targets.
    pub y_maps: Vec<PixelMap>,
    pub x_u: Option<Tensor>,
}

impl BatchTensors {
    pub fn len(&self) -> usize {
        self.labeled_ids.len() + self.unlabeled_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn augment_seed(base: u64, step: u64, slot: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(slot as u64);
    rng.next_u64()
}

/// Looks up, augments and stacks the samples of a batch. Unlabeled samples
/// lose their labels before they are touched.
pub fn materialize(
    data: &Dataset,
    labeled: &[u64],
    unlabeled: &[u64],
    ops: &[AugmentOp],
    aug_seed: u64,
    step: u64,
) -> Result<BatchTensors> {
    let prep = |s: &Sample, slot: usize| -> Result<Sample> {
        if ops.is_empty() {
            Ok(s.clone())
        } else {
            augment(s, ops, augment_seed(aug_seed, step, slot))
        }
    };
    let l: Vec<Sample> = labeled
        .iter()
        .enumerate()
        .map(|(i, id)| prep(data.get(*id)?, i))
        .collect::<Result<_>>()?;
    let u: Vec<Sample> = unlabeled
        .iter()
        .enumerate()
        .map(|(i, id)| prep(&data.get(*id)?.unlabeled(), labeled.len() + i))
        .collect::<Result<_>>()?;
    let (h, w, _) = l
        .first()
        .ok_or_else(|| GctError::input("batch has no labeled samples"))?
        .image
        .shape();
    let y_maps = l
        .iter()
        .map(|s| s.label.as_ref().expect("labeled").to_pixel_map(h, w))
        .collect::<Result<_>>()?;
    Ok(BatchTensors {
        labeled_ids: labeled.to_vec(),
        unlabeled_ids: unlabeled.to_vec(),
        x_l: stack_images(&l, DType::F32)?,
        y_l: stack_targets(&l, DType::F32)?,
        y_maps,
        x_u: if u.is_empty() { None } else { Some(stack_images(&u, DType::F32)?) },
    })
}

/// Validation metric of `model` over `data`: mIoU from the confusion matrix
/// accumulated over all pixels, or PSNR averaged over images (peak 1.0).
pub fn evaluate(model: &dyn TaskModel, data: &Dataset, metric: MetricId) -> Result<f64> {
    if data.is_empty() {
        return Err(GctError::config("val", "validation set is empty"));
    }
    const CHUNK: usize = 32;
    let mut cm = ConfusionMatrix::new(model.spec().out_channels);
    let mut psnr_sum = 0.0;
    for chunk in data.samples.chunks(CHUNK) {
        let x = stack_images(chunk, DType::F32)?;
        let out = model.forward(&x, ForwardMode::Eval)?;
        match (metric, stack_targets(chunk, DType::F32)?) {
            (MetricId::Miou, TargetBatch::Classes(y)) => {
                let pred = out.raw.argmax(3)?.flatten_all()?.to_vec1::<u32>()?;
                let truth = y.flatten_all()?.to_vec1::<u32>()?;
                cm.add_all(&truth, &pred)?;
            }
            (MetricId::Psnr, TargetBatch::Values(y)) => {
                let b = chunk.len();
                let p = out.map.to_dtype(DType::F64)?.reshape((b, ()))?.to_vec2::<f64>()?;
                let t = y.to_dtype(DType::F64)?.reshape((b, ()))?.to_vec2::<f64>()?;
                for (a, b) in p.iter().zip(&t) {
                    psnr_sum += psnr_slices(a, b, 1.0)?;
                }
            }
            _ => return Err(GctError::input("metric does not match the label kind")),
        }
    }
    match metric {
        MetricId::Miou => miou(&cm),
        MetricId::Psnr => Ok(psnr_sum / data.len() as f64),
    }
}

/// Outcome of [`fit`].
pub struct FitOutcome {
    pub state: TrainState,
    pub report: RunReport,
}

/// Where and under what name a run writes its files.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub run_id: String,
    pub ratio: String,
    /// Global seed recorded in the report.
    pub seed: u64,
    /// Text written verbatim to `config.snapshot`; the training
    /// configuration as JSON when absent.
    pub snapshot: Option<String>,
}

impl RunOutput {
    fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| GctError::io(&self.dir, e))
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

fn check_finite(step: u64, losses: &BTreeMap<String, f64>, batch: &BatchTensors, out: Option<&RunOutput>) -> Result<()> {
    let Some((name, value)) = losses.iter().find(|(_, v)| !v.is_finite()) else {
        return Ok(());
    };
    let detail = format!("{name} = {value}");
    let dump = match out {
        Some(o) => {
            o.ensure()?;
            let path = o.dir.join(format!("nonfinite_step{step}.json"));
            let body = serde_json::json!({
                "step": step,
                "labeled_ids": batch.labeled_ids,
                "unlabeled_ids": batch.unlabeled_ids,
                "losses": losses.iter().map(|(k, v)| (k.clone(), v.to_string())).collect::<BTreeMap<_, _>>(),
            });
            std::fs::write(&path, body.to_string()).map_err(|e| GctError::io(&path, e))?;
            Some(path)
        }
        None => None,
    };
    Err(GctError::NonFinite { step, detail, dump })
}

/// Runs `cfg.epochs` epochs of `cfg.method`, validating after every epoch.
///
/// Mixed-batch methods alternate per batch: the task step with the flaw
/// detector frozen, then the flaw detector step on the same labeled samples.
/// With `out` set, the per-epoch log, checkpoints, config snapshot and run
/// report are written under `out.dir`.
pub fn fit(cfg: &GctConfig, data: &TrainData, out: Option<&RunOutput>) -> Result<FitOutcome> {
    cfg.validate()?;
    data.manifest.check()?;
    if data.manifest.total != data.train.len() {
        return Err(GctError::config("split", "manifest size does not match the training set"));
    }
    if let Some(o) = out {
        o.ensure()?;
        let snapshot = o.dir.join("config.snapshot");
        let text = match &o.snapshot {
            Some(t) => t.clone(),
            None => serde_json::to_string_pretty(cfg).map_err(|e| GctError::input(e.to_string()))? + "\n",
        };
        std::fs::write(&snapshot, text).map_err(|e| GctError::io(&snapshot, e))?;
        let log = o.log_path();
        std::fs::write(&log, "").map_err(|e| GctError::io(&log, e))?;
    }
    let mut state = TrainState::new(cfg)?;
    let steps_per_epoch = cfg.steps_per_epoch(&data.manifest) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut best = f64::NEG_INFINITY;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.order);
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let epoch_seed = order_rng.next_u64();
        let plan: Vec<(Vec<u64>, Vec<u64>)> = match cfg.method {
            Method::SupOnly => supervised_batches(&data.manifest.labeled_ids, cfg.labeled_batch, epoch_seed)?
                .into_iter()
                .map(|l| (l, Vec::new()))
                .collect(),
            _ => compose_batches(&data.manifest, cfg.labeled_batch, cfg.unlabeled_batch, epoch_seed)?
                .into_iter()
                .map(|b| (b.labeled, b.unlabeled))
                .collect(),
        };
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let batches = plan.len() as f64;
        for (labeled, unlabeled) in plan {
            let batch = materialize(&data.train, &labeled, &unlabeled, &cfg.augment, cfg.seeds.augment, state.step)?;
            let lr_factor = cfg.task_optim.schedule.factor(state.step, total_steps);
            state.opt1.set_lr(cfg.task_optim.adam.lr * lr_factor);
            if let Some(o) = state.opt2.as_mut() {
                o.set_lr(cfg.task_optim.adam.lr * lr_factor);
            }
            if let Some(o) = state.opt_f.as_mut() {
                o.set_lr(cfg.flaw_optim.adam.lr * cfg.flaw_optim.schedule.factor(state.step, total_steps));
            }
            let eta = match cfg.method {
                Method::MeanTeacher | Method::FlawGatedMt => cfg.mt.eta,
                _ => cfg.weights.eta,
            };
            state.rampup = cosine_rampup(state.step as f64 / steps_per_epoch as f64, eta)?;
            let losses = run_step(cfg, &mut state, &batch)?;
            check_finite(state.step, &losses, &batch, out)?;
            for (k, v) in losses {
                *sums.entry(k).or_default() += v;
            }
            state.step += 1;
            state.samples_seen += batch.len() as u64;
        }
        let metric = evaluate(state.eval_model(cfg), &data.val, cfg.task.metric)?;
        let record = EpochRecord {
            epoch,
            step: state.step,
            losses: sums.into_iter().map(|(k, v)| (k, v / batches)).collect(),
            rampup: state.rampup,
            metric,
            samples_seen: state.samples_seen,
        };
        if let Some(o) = out {
            let line = serde_json::to_string(&record).map_err(|e| GctError::input(e.to_string()))?;
            let log = o.log_path();
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&log)
                .map_err(|e| GctError::io(&log, e))?;
            writeln!(f, "{line}").map_err(|e| GctError::io(&log, e))?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                state.checkpoint(cfg)?.save(&o.dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
            if metric > best {
                state.checkpoint(cfg)?.save(&o.dir.join("best.ckpt"))?;
            }
        }
        best = best.max(metric);
        state.history.push(record);
    }
    let report = RunReport {
        run_id: out.map(|o| o.run_id.clone()).unwrap_or_else(|| cfg.method.id().to_string()),
        method: cfg.method.id().to_string(),
        ratio: out
            .map(|o| o.ratio.clone())
            .unwrap_or_else(|| data.manifest.ratio.to_string()),
        seed: out.map(|o| o.seed).unwrap_or(cfg.seeds.model1),
        metric: cfg.task.metric,
        best_metric: best,
        final_metric: state.history.last().map(|r| r.metric).unwrap_or(f64::NAN),
        epochs: state.history.clone(),
        samples_seen: state.samples_seen,
    };
    if let Some(o) = out {
        report.save(&o.report_path())?;
    }
    Ok(FitOutcome { state, report })
}

fn run_step(cfg: &GctConfig, state: &mut TrainState, batch: &BatchTensors) -> Result<BTreeMap<String, f64>> {
    let mut losses = BTreeMap::new();
    match cfg.method {
        Method::SupOnly => {
            let sup = supervised_step(state.t1.as_ref(), &mut state.opt1, &batch.x_l, &batch.y_l)?;
            losses.insert("sup1".into(), sup);
        }
        Method::Gct => {
            let t = train_step_tasks(cfg, state, batch)?;
            losses.extend([
                ("sup1".into(), t.sup[0]),
                ("sup2".into(), t.sup[1]),
                ("dc1".into(), t.dc[0]),
                ("dc2".into(), t.dc[1]),
                ("fc1".into(), t.fc[0]),
                ("fc2".into(), t.fc[1]),
            ]);
            let f = train_step_flaw(cfg, state, batch)?;
            losses.insert("flaw".into(), f.total);
        }
        Method::MeanTeacher | Method::FlawGatedMt => {
            let (sup, cons) = crate::baselines::mt_step(cfg, state, batch)?;
            losses.insert("sup1".into(), sup);
            losses.insert("cons".into(), cons);
            if cfg.method == Method::FlawGatedMt {
                let f = train_step_flaw(cfg, state, batch)?;
                losses.insert("flaw".into(), f.total);
            }
        }
    }
    Ok(losses)
}

/// Reads the per-epoch log written by [`fit`].
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| GctError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| GctError::format(path, e.to_string())))
        .collect()
}

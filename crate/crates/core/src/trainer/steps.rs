use candle_core::{DType, Tensor};

use super::{BatchTensors, GctConfig, TrainState};
use crate::constraints::{
    clamp_flaw, dc_masks, fc_mask, loss_dc, loss_fc, loss_flaw_detector, loss_sup_ce, loss_sup_mse, total_task_loss,
    Criterion, FlawMap,
};
use crate::data::TargetBatch;
use crate::error::{GctError, Result};
use crate::flawmap::pipeline_c;
use crate::maps::{GrayMap, PixelMap};
use crate::models::{FlawDetector, TaskModel, TaskOutput, TaskSpec};
use crate::nn::{ops, Adam, ForwardMode};

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Criterion of `spec` on labeled outputs.
pub fn supervised_loss(spec: &TaskSpec, out: &TaskOutput, y: &TargetBatch) -> Result<Tensor> {
    match (spec.criterion, y) {
        (Criterion::CrossEntropy, TargetBatch::Classes(ids)) => loss_sup_ce(&out.raw, ids),
        (Criterion::SquaredError, TargetBatch::Values(v)) => loss_sup_mse(&out.map, &v.to_dtype(out.map.dtype())?),
        _ => Err(GctError::input("label kind does not match the task criterion")),
    }
}

/// One supervised update of `model`; returns the loss before the update.
pub fn supervised_step(model: &dyn TaskModel, opt: &mut Adam, x: &Tensor, y: &TargetBatch) -> Result<f64> {
    let out = model.forward(x, ForwardMode::Train)?;
    let loss = supervised_loss(model.spec(), &out, y)?;
    let grads = loss.backward()?;
    opt.step(&grads)?;
    scalar(&loss)
}

/// Per-model loss terms of a task step, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStepLosses {
    pub sup: [f64; 2],
    pub dc: [f64; 2],
    pub fc: [f64; 2],
    pub total: [f64; 2],
}

/// Labeled and unlabeled outputs, stacked along the batch axis.
pub(crate) fn all_outputs(labeled: &TaskOutput, unlabeled: Option<&TaskOutput>) -> Result<Tensor> {
    match unlabeled {
        Some(u) => Ok(Tensor::cat(&[&labeled.map, &u.map], 0)?),
        None => Ok(labeled.map.clone()),
    }
}

pub(crate) fn all_inputs(batch: &BatchTensors) -> Result<Tensor> {
    match &batch.x_u {
        Some(u) => Ok(Tensor::cat(&[&batch.x_l, u], 0)?),
        None => Ok(batch.x_l.clone()),
    }
}

/// Step 1: updates both task models with the flaw detector frozen.
///
/// The supervised term uses the labeled part of the batch; the consistency and
/// flaw-correction terms use every image. Masks come from the min-max
/// normalised detector output; the correction term pushes the squashed
/// detector output towards zero, with gradients reaching each task model
/// through the frozen detector.
pub fn train_step_tasks(cfg: &GctConfig, state: &mut TrainState, batch: &BatchTensors) -> Result<TaskStepLosses> {
    let t2 = state.t2.as_ref().ok_or_else(|| GctError::input("task step needs two task models"))?;
    let opt2 = state.opt2.as_mut().ok_or_else(|| GctError::input("task step needs two optimizers"))?;
    let models: [&dyn TaskModel; 2] = [state.t1.as_ref(), t2.as_ref()];
    let w = cfg.weights;
    // without constraints the unlabeled images would only move the BN statistics
    let constrained = w.lambda_dc != 0.0 || w.lambda_fc != 0.0;
    let mut outs_l = Vec::with_capacity(2);
    let mut outs_u = Vec::with_capacity(2);
    for m in models {
        outs_l.push(m.forward(&batch.x_l, ForwardMode::Train)?);
        outs_u.push(match &batch.x_u {
            Some(x) if constrained => Some(m.forward(x, ForwardMode::Train)?),
            _ => None,
        });
    }
    let sup = [
        supervised_loss(&cfg.task, &outs_l[0], &batch.y_l)?,
        supervised_loss(&cfg.task, &outs_l[1], &batch.y_l)?,
    ];
    let zero = sup[0].zeros_like()?;
    let (dc, fc) = if !constrained {
        ([zero.clone(), zero.clone()], [zero.clone(), zero])
    } else {
        let flaw = state
            .flaw
            .as_ref()
            .ok_or_else(|| GctError::input("constraints need a flaw detector"))?;
        let x = all_inputs(batch)?;
        let preds = [
            all_outputs(&outs_l[0], outs_u[0].as_ref())?,
            all_outputs(&outs_l[1], outs_u[1].as_ref())?,
        ];
        let raw = [
            flaw.forward(&x, &preds[0], ForwardMode::Frozen)?,
            flaw.forward(&x, &preds[1], ForwardMode::Frozen)?,
        ];
        let f1 = FlawMap::normalized(&raw[0])?;
        let f2 = FlawMap::normalized(&raw[1])?;
        let (m1, m2) = dc_masks(&clamp_flaw(&f1, w.xi)?, &clamp_flaw(&f2, w.xi)?)?;
        let m_fc = fc_mask(&f1, &f2, w.xi)?;
        let dc = [loss_dc(&preds[0], &preds[1], &m1)?, loss_dc(&preds[1], &preds[0], &m2)?];
        let fc = [
            loss_fc(&ops::sigmoid(&raw[0])?, &m_fc)?,
            loss_fc(&ops::sigmoid(&raw[1])?, &m_fc)?,
        ];
        (dc, fc)
    };
    let totals = [
        total_task_loss(&sup[0], &dc[0], &fc[0], &w, state.rampup)?,
        total_task_loss(&sup[1], &dc[1], &fc[1], &w, state.rampup)?,
    ];
    let values = TaskStepLosses {
        sup: [scalar(&sup[0])?, scalar(&sup[1])?],
        dc: [scalar(&dc[0])?, scalar(&dc[1])?],
        fc: [scalar(&fc[0])?, scalar(&fc[1])?],
        total: [scalar(&totals[0])?, scalar(&totals[1])?],
    };
    if values.total.iter().any(|v| !v.is_finite()) {
        // leave the parameters untouched; the caller aborts with a dump
        return Ok(values);
    }
    let g1 = totals[0].backward()?;
    let g2 = totals[1].backward()?;
    state.opt1.step(&g1)?;
    opt2.step(&g2)?;
    Ok(values)
}

/// Flaw targets for labeled predictions `[B, H, W, O]` against label maps.
pub fn flaw_targets(cfg: &GctConfig, pred: &Tensor, labels: &[PixelMap]) -> Result<Vec<GrayMap>> {
    let preds = PixelMap::from_batch(pred)?;
    if preds.len() != labels.len() {
        return Err(GctError::input("prediction and label counts differ"));
    }
    preds
        .iter()
        .zip(labels)
        .map(|(p, y)| pipeline_c(p, y, &cfg.pipeline))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlawStepLosses {
    /// Per-model detector loss.
    pub per_model: [f64; 2],
    pub total: f64,
}

/// Detector loss summed over the two predictions of the same labeled images.
pub(crate) fn flaw_loss(
    cfg: &GctConfig,
    flaw: &FlawDetector,
    x_l: &Tensor,
    preds: [&Tensor; 2],
    labels: &[PixelMap],
) -> Result<(Tensor, [f64; 2])> {
    let b = x_l.dim(0)?;
    let mut targets = flaw_targets(cfg, preds[0], labels)?;
    targets.extend(flaw_targets(cfg, preds[1], labels)?);
    let gt = GrayMap::stack(&targets, x_l.dtype())?;
    let x = Tensor::cat(&[x_l, x_l], 0)?;
    let p = Tensor::cat(&[preds[0], preds[1]], 0)?;
    let prob = flaw.probability(&x, &p, ForwardMode::Train)?;
    let per = [
        scalar(&loss_flaw_detector(&prob.narrow(0, 0, b)?, &gt.narrow(0, 0, b)?)?)?,
        scalar(&loss_flaw_detector(&prob.narrow(0, b, b)?, &gt.narrow(0, b, b)?)?)?,
    ];
    // the batch mean runs over 2b images; scale back to a per-model sum
    let loss = (loss_flaw_detector(&prob, &gt)? * 2.0)?;
    Ok((loss, per))
}

/// Step 2: updates the flaw detector on the labeled part of the batch with
/// both task models frozen. Targets come from the ground-truth pipeline.
pub fn train_step_flaw(cfg: &GctConfig, state: &mut TrainState, batch: &BatchTensors) -> Result<FlawStepLosses> {
    let t2 = state.t2.as_ref().ok_or_else(|| GctError::input("flaw step needs two task models"))?;
    let flaw = state
        .flaw
        .as_ref()
        .ok_or_else(|| GctError::input("flaw step needs a flaw detector"))?;
    let opt = state
        .opt_f
        .as_mut()
        .ok_or_else(|| GctError::input("flaw step needs an optimizer"))?;
    let p1 = state.t1.forward(&batch.x_l, ForwardMode::Eval)?.map.detach();
    let p2 = t2.forward(&batch.x_l, ForwardMode::Eval)?.map.detach();
    let (loss, per_model) = flaw_loss(cfg, flaw, &batch.x_l, [&p1, &p2], &batch.y_maps)?;
    let total = scalar(&loss)?;
    if total.is_finite() {
        opt.step(&loss.backward()?)?;
    }
    Ok(FlawStepLosses { per_model, total })
}

//! Comparison methods on the same data, model and logging stack: supervised
//! training on the labeled subset, Mean Teacher, and Mean Teacher with a flaw
//! detector gating its consistency term.

use candle_core::{DType, Tensor};

use crate::constraints::{loss_dc, BinaryMask, FlawMap};
use crate::error::{GctError, Result};
use crate::nn::{ForwardMode, ParamStore};
use crate::trainer::{
    fit, supervised_loss, BatchTensors, FitOutcome, GctConfig, Method, RunOutput, TrainData, TrainState,
};

fn with_method(cfg: &GctConfig, method: Method) -> GctConfig {
    let mut cfg = cfg.clone();
    cfg.method = method;
    cfg
}

/// Supervised training of one task model on the labeled subset, `cfg.epochs`
/// passes over it.
pub fn suponly_fit(cfg: &GctConfig, data: &TrainData, out: Option<&RunOutput>) -> Result<FitOutcome> {
    fit(&with_method(cfg, Method::SupOnly), data, out)
}

pub fn mt_fit(cfg: &GctConfig, data: &TrainData, out: Option<&RunOutput>) -> Result<FitOutcome> {
    fit(&with_method(cfg, Method::MeanTeacher), data, out)
}

pub fn flaw_gated_mt_fit(cfg: &GctConfig, data: &TrainData, out: Option<&RunOutput>) -> Result<FitOutcome> {
    fit(&with_method(cfg, Method::FlawGatedMt), data, out)
}

/// `teacher <- alpha * teacher + (1 - alpha) * student` for every parameter;
/// buffers are copied from the student.
pub fn ema_update(student: &ParamStore, teacher: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(GctError::config("mt.alpha", format!("must lie in [0, 1), got {alpha}")));
    }
    let s: Vec<_> = student.named_tensors().collect();
    let t: Vec<_> = teacher.named_tensors().collect();
    if s.len() != t.len() {
        return Err(GctError::input("student and teacher differ in parameter count"));
    }
    let n_params = student.params().count();
    for (i, ((sn, sv), (tn, tv))) in s.iter().zip(&t).enumerate() {
        if sn != tn || sv.shape() != tv.shape() {
            return Err(GctError::input(format!("parameter mismatch: {sn} vs {tn}")));
        }
        let next = if i < n_params {
            ((tv.as_tensor() * alpha)? + (sv.as_tensor() * (1.0 - alpha))?)?
        } else {
            sv.as_tensor().copy()?
        };
        tv.set(&next.detach())?;
    }
    Ok(())
}

/// Gate of the flaw-gated consistency term: open where the teacher's flaw is
/// not larger than the student's (ties stay open).
pub fn teacher_gate(teacher_flaw: &FlawMap, student_flaw: &FlawMap) -> Result<BinaryMask> {
    let (t, s) = (teacher_flaw.as_tensor(), student_flaw.as_tensor());
    BinaryMask::new(t.le(s)?.to_dtype(t.dtype())?)
}

/// One student update plus the teacher's EMA step; returns the supervised and
/// consistency losses before the update.
pub(crate) fn mt_step(cfg: &GctConfig, state: &mut TrainState, batch: &BatchTensors) -> Result<(f64, f64)> {
    let teacher = state.t2.as_ref().ok_or_else(|| GctError::input("Mean Teacher needs a teacher"))?;
    let student = state.t1.as_ref();
    let s_l = student.forward(&batch.x_l, ForwardMode::Train)?;
    let s_u = match &batch.x_u {
        Some(x) if cfg.mt.lambda != 0.0 => Some(student.forward(x, ForwardMode::Train)?),
        _ => None,
    };
    let sup = supervised_loss(&cfg.task, &s_l, &batch.y_l)?;
    let cons = if cfg.mt.lambda == 0.0 {
        sup.zeros_like()?
    } else {
        let stud = crate::trainer::all_outputs(&s_l, s_u.as_ref())?;
        let t_l = teacher.forward(&batch.x_l, ForwardMode::Eval)?;
        let t_u = match &batch.x_u {
            Some(x) => Some(teacher.forward(x, ForwardMode::Eval)?),
            None => None,
        };
        let tchr = crate::trainer::all_outputs(&t_l, t_u.as_ref())?.detach();
        let (b, h, w, _) = stud.dims4()?;
        let mask = match (cfg.method, &state.flaw) {
            (Method::FlawGatedMt, Some(flaw)) => {
                let x = crate::trainer::all_inputs(batch)?;
                let ft = FlawMap::normalized(&flaw.forward(&x, &tchr, ForwardMode::Frozen)?)?;
                let fs = FlawMap::normalized(&flaw.forward(&x, &stud.detach(), ForwardMode::Frozen)?)?;
                teacher_gate(&ft, &fs)?
            }
            (Method::FlawGatedMt, None) => return Err(GctError::input("gated Mean Teacher needs a flaw detector")),
            _ => BinaryMask::new(Tensor::ones((b, h, w), stud.dtype(), stud.device())?)?,
        };
        loss_dc(&stud, &tchr, &mask)?
    };
    let total = (&sup + (&cons * (state.rampup * cfg.mt.lambda))?)?;
    let total_v = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let sup_v = sup.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let cons_v = cons.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if total_v.is_finite() {
        state.opt1.step(&total.backward()?)?;
        ema_update(state.t1.params(), teacher.params(), cfg.mt.alpha)?;
    }
    Ok((sup_v, cons_v))
}

//! Task networks and the flaw detector.

mod checkpoint;
mod flaw_detector;
mod task;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use flaw_detector::{FlawDetector, FlawDetectorArch};
pub use task::{build_task_model, OutputActivation, TaskKind, TaskModel, TaskOutput, TaskSpec, ToyUNet};

use candle_core::Tensor;

use crate::error::Result;

/// Per-pixel confidence `1 - flaw`.
pub fn prediction_confidence(flaw: &Tensor) -> Result<Tensor> {
    Ok(flaw.affine(-1.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn confidence_complements_flaw() {
        let f = Tensor::new(&[0.0f64, 0.3, 1.0], &Device::Cpu).unwrap();
        let c = prediction_confidence(&f).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(c[0], 1.0);
        assert!((c[1] - 0.7).abs() < 1e-15);
        let total: Vec<f64> = (prediction_confidence(&f).unwrap() + &f).unwrap().to_vec1().unwrap();
        assert!(total.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}

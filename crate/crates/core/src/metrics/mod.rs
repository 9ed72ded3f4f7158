//! Validation metrics, run reports and image output.

mod dump;
mod report;

pub use dump::{dump_flawmaps, encode_gray, flawmap_from_images, read_pixel_map, FlawDumpEntry, ImageEncoding};
pub use report::{report, write_curves_svg, EpochRecord, ReportTable, RunReport};

use serde::{Deserialize, Serialize};

use crate::error::{GctError, Result};
use crate::maps::PixelMap;

/// Which validation metric a task reports. Both are higher-is-better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Miou,
    Psnr,
}

impl MetricId {
    pub fn name(self) -> &'static str {
        match self {
            MetricId::Miou => "miou",
            MetricId::Psnr => "psnr",
        }
    }
}

/// `K x K` counts, rows are ground truth and columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(GctError::input("confusion matrix must be square"));
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: u32, pred: u32) -> Result<()> {
        let (t, p) = (truth as usize, pred as usize);
        if t >= self.classes || p >= self.classes {
            return Err(GctError::input(format!(
                "class pair ({truth}, {pred}) outside 0..{}",
                self.classes
            )));
        }
        self.counts[t * self.classes + p] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[u32], pred: &[u32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(GctError::input("truth and prediction lengths differ"));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(GctError::input("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Mean IoU over classes that occur in the truth or the prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    if k < 2 {
        return Err(GctError::input("mIoU needs at least two classes"));
    }
    if cm.total() == 0 {
        return Err(GctError::input("confusion matrix is empty"));
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let tp = cm.get(c, c);
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
        let denom = tp + fp + fn_;
        if denom > 0 {
            sum += tp as f64 / denom as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` when the maps are identical.
pub fn psnr(pred: &PixelMap, label: &PixelMap, max_value: f64) -> Result<f64> {
    if pred.shape() != label.shape() {
        return Err(GctError::input(format!(
            "shape mismatch {:?} vs {:?}",
            pred.shape(),
            label.shape()
        )));
    }
    psnr_slices(pred.data(), label.data(), max_value)
}

/// `psnr` over two flat buffers of equal length.
pub fn psnr_slices(pred: &[f64], label: &[f64], max_value: f64) -> Result<f64> {
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(GctError::input("max_value must be positive"));
    }
    if pred.len() != label.len() || pred.is_empty() {
        return Err(GctError::input("psnr needs two non-empty buffers of equal length"));
    }
    let mse = pred.iter().zip(label).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(psnr_from_mse(mse, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

//! Synthetic datasets, labeled/unlabeled splits, batch schedules and augmentation.

mod augment;
mod batch;
mod cache;
mod split;
mod synth;

pub use augment::{augment, hflip, AugmentOp};
pub use batch::{compose_batches, sample_budget, supervised_batches, SslBatch};
pub use cache::load_or_generate;
pub use split::{make_split, Ratio, SplitManifest};
pub use synth::{synth_denoising, synth_denoising_with, synth_segmentation, DatasetSpec, DenoiseNoise, SynthKind};

use candle_core::{DType, Device, Tensor};

use crate::error::{GctError, Result};
use crate::maps::PixelMap;

/// Per-pixel supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Class id per pixel, row-major.
    Classes { classes: usize, ids: Vec<u32> },
    /// Regression target with the image's layout.
    Values(PixelMap),
}

impl Target {
    /// Label in prediction layout: one-hot for classes, the values otherwise.
    pub fn to_pixel_map(&self, height: usize, width: usize) -> Result<PixelMap> {
        match self {
            Target::Classes { classes, ids } => PixelMap::one_hot(height, width, *classes, ids),
            Target::Values(m) => Ok(m.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// Values in `[0, 1]`.
    pub image: PixelMap,
    pub label: Option<Target>,
}

impl Sample {
    /// Copy with the label removed.
    pub fn unlabeled(&self) -> Sample {
        Sample {
            id: self.id,
            image: self.image.clone(),
            label: None,
        }
    }
}

/// A generated dataset; sample `i` has id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: u64) -> Result<&Sample> {
        self.samples
            .get(id as usize)
            .ok_or_else(|| GctError::input(format!("sample id {id} outside dataset of {}", self.samples.len())))
    }
}

/// Stacks sample images into `[B, H, W, C]`.
pub fn stack_images(samples: &[Sample], dtype: DType) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| GctError::input("empty batch"))?;
    let (h, w, c) = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * h * w * c);
    for s in samples {
        if s.image.shape() != (h, w, c) {
            return Err(GctError::input("batch images differ in shape"));
        }
        data.extend_from_slice(s.image.data());
    }
    Ok(Tensor::from_vec(data, (samples.len(), h, w, c), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Labels of a batch in tensor form.
#[derive(Debug, Clone)]
pub enum TargetBatch {
    /// `[B, H, W]` u32 class ids.
    Classes(Tensor),
    /// `[B, H, W, C]` values.
    Values(Tensor),
}

/// Stacks sample labels; every sample must be labeled with the same kind.
pub fn stack_targets(samples: &[Sample], dtype: DType) -> Result<TargetBatch> {
    let first = samples.first().ok_or_else(|| GctError::input("empty batch"))?;
    let (h, w, _) = first.image.shape();
    let b = samples.len();
    match first.label {
        Some(Target::Classes { .. }) => {
            let mut ids = Vec::with_capacity(b * h * w);
            for s in samples {
                match &s.label {
                    Some(Target::Classes { ids: v, .. }) => ids.extend_from_slice(v),
                    _ => return Err(GctError::input(format!("sample {} has no class label", s.id))),
                }
            }
            Ok(TargetBatch::Classes(Tensor::from_vec(ids, (b, h, w), &Device::Cpu)?))
        }
        Some(Target::Values(ref m)) => {
            let c = m.channels();
            let mut data = Vec::with_capacity(b * h * w * c);
            for s in samples {
                match &s.label {
                    Some(Target::Values(v)) if v.shape() == (h, w, c) => data.extend_from_slice(v.data()),
                    _ => return Err(GctError::input(format!("sample {} has no matching value label", s.id))),
                }
            }
            Ok(TargetBatch::Values(
                Tensor::from_vec(data, (b, h, w, c), &Device::Cpu)?.to_dtype(dtype)?,
            ))
        }
        None => Err(GctError::input(format!("sample {} is unlabeled", first.id))),
    }
}

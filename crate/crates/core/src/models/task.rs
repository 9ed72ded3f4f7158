use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::Criterion;
use crate::error::{GctError, Result};
use crate::metrics::MetricId;
use crate::nn::{ops, Conv2d, ForwardMode, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PixelClassification,
    PixelRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// Per-pixel softmax over channels.
    Softmax,
    Identity,
    Sigmoid,
}

/// What a task network consumes and produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub criterion: Criterion,
    pub activation: OutputActivation,
    pub metric: MetricId,
    /// Channel widths per resolution level, finest first. `len - 1` is the number
    /// of down/up-sampling stages.
    pub widths: Vec<usize>,
}

impl TaskSpec {
    pub fn segmentation(in_channels: usize, classes: usize) -> Self {
        Self {
            kind: TaskKind::PixelClassification,
            in_channels,
            out_channels: classes,
            criterion: Criterion::CrossEntropy,
            activation: OutputActivation::Softmax,
            metric: MetricId::Miou,
            widths: vec![16, 24, 32, 40, 48],
        }
    }

    pub fn denoising(channels: usize) -> Self {
        Self {
            kind: TaskKind::PixelRegression,
            in_channels: channels,
            out_channels: channels,
            criterion: Criterion::SquaredError,
            activation: OutputActivation::Identity,
            metric: MetricId::Psnr,
            widths: vec![16, 24, 32, 40, 48],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(GctError::config("task.in_channels", "must be >= 1"));
        }
        if self.out_channels == 0 {
            return Err(GctError::config("task.out_channels", "must be >= 1"));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(GctError::config("task.widths", "need at least two positive widths"));
        }
        match self.kind {
            TaskKind::PixelClassification => {
                if self.criterion != Criterion::CrossEntropy || self.activation != OutputActivation::Softmax {
                    return Err(GctError::config(
                        "task.criterion",
                        "pixel classification requires cross_entropy with softmax output",
                    ));
                }
                if self.out_channels < 2 {
                    return Err(GctError::config("task.out_channels", "classification needs >= 2 classes"));
                }
            }
            TaskKind::PixelRegression => {
                if self.criterion != Criterion::SquaredError || self.activation == OutputActivation::Softmax {
                    return Err(GctError::config(
                        "task.criterion",
                        "pixel regression requires squared_error with identity or sigmoid output",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Output of a task network for a batch.
#[derive(Debug, Clone)]
pub struct TaskOutput {
    /// Pre-activation values (logits for classification).
    pub raw: Tensor,
    /// Activated `[B, H, W, O]` prediction map.
    pub map: Tensor,
}

/// A network solving the pixel-wise task.
pub trait TaskModel: Send + Sync {
    fn spec(&self) -> &TaskSpec;
    fn params(&self) -> &ParamStore;
    fn seed(&self) -> u64;
    /// `images` is `[B, H, W, C_in]`.
    fn forward(&self, images: &Tensor, mode: ForwardMode) -> Result<TaskOutput>;
}

/// Small encoder-decoder: stride-2 convolutions down, nearest upsampling plus
/// skip concatenation up, 3x3 kernels and ReLU throughout, 1x1 head.
pub struct ToyUNet {
    spec: TaskSpec,
    seed: u64,
    store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

impl ToyUNet {
    pub fn new(spec: TaskSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let w = &spec.widths;
        let stem = Conv2d::new(&mut store, "stem", spec.in_channels, w[0], 3, 1, Init::He, &mut rng)?;
        let down = (1..w.len())
            .map(|i| Conv2d::new(&mut store, &format!("down{i}"), w[i - 1], w[i], 3, 2, Init::He, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..w.len() - 1)
            .map(|i| Conv2d::new(&mut store, &format!("up{i}"), w[i + 1] + w[i], w[i], 3, 1, Init::He, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(&mut store, "head", w[0], spec.out_channels, 1, 1, Init::FanIn, &mut rng)?;
        Ok(Self {
            spec,
            seed,
            store,
            stem,
            down,
            up,
            head,
        })
    }
}

impl TaskModel for ToyUNet {
    fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn forward(&self, images: &Tensor, mode: ForwardMode) -> Result<TaskOutput> {
        let (_, h, w, c) = images.dims4()?;
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(GctError::input(format!("input {h}x{w} must be a multiple of {m}")));
        }
        if c != self.spec.in_channels {
            return Err(GctError::input(format!(
                "expected {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let mut skips = vec![ops::relu(&self.stem.forward(images, mode)?)?];
        for conv in &self.down {
            let next = ops::relu(&conv.forward(skips.last().expect("non-empty"), mode)?)?;
            skips.push(next);
        }
        let mut y = skips.pop().expect("non-empty");
        for (i, conv) in self.up.iter().enumerate().rev() {
            let merged = Tensor::cat(&[&ops::upsample_nearest2x(&y)?, &skips[i]], 3)?;
            y = ops::relu(&conv.forward(&merged, mode)?)?;
        }
        let raw = self.head.forward(&y, mode)?;
        let map = match self.spec.activation {
            OutputActivation::Softmax => ops::softmax_last(&raw)?,
            OutputActivation::Identity => raw.clone(),
            OutputActivation::Sigmoid => ops::sigmoid(&raw)?,
        };
        Ok(TaskOutput { raw, map })
    }
}

/// Builds the toy task network for `spec` with a seeded initialisation.
pub fn build_task_model(spec: &TaskSpec, seed: u64) -> Result<Box<dyn TaskModel>> {
    Ok(Box::new(ToyUNet::new(spec.clone(), seed, DType::F32)?))
}

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GctError, Result};
use crate::nn::{ops, BatchNorm, Conv2d, ForwardMode, Init, ParamStore};

/// Layer table of a flaw detector: one `(out_channels, stride)` pair per conv.
/// Every conv but the last is followed by batch norm and a leaky ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlawDetectorArch {
    pub kernel: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
}

impl FlawDetectorArch {
    /// The full-size stack: 8 convs of 4x4, widths 64 to 512, total stride 32.
    pub fn reference() -> Self {
        Self {
            kernel: 4,
            widths: vec![64, 128, 128, 256, 256, 512, 512, 1],
            strides: vec![2, 2, 1, 2, 1, 2, 1, 2],
            leaky_slope: 0.2,
        }
    }

    /// Same layer pattern, narrower and with total stride 4 so that 32x32
    /// inputs keep an 8x8 map before the final resize.
    pub fn desk() -> Self {
        Self {
            kernel: 4,
            widths: vec![16, 32, 32, 32, 32, 32, 32, 1],
            strides: vec![2, 1, 1, 2, 1, 1, 1, 1],
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(GctError::config(
                "flaw_detector.strides",
                "need one stride per width and at least one layer",
            ));
        }
        if self.widths.last() != Some(&1) {
            return Err(GctError::config("flaw_detector.widths", "last layer must have one channel"));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.kernel == 0 {
            return Err(GctError::config("flaw_detector.widths", "widths, strides and kernel must be positive"));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(GctError::config("flaw_detector.leaky_slope", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Learnable scalars for `in_channels` inputs: conv weights and biases for
    /// every layer plus scale and shift of each normalised layer.
    pub fn parameter_count(&self, in_channels: usize) -> usize {
        let k2 = self.kernel * self.kernel;
        let mut c_in = in_channels;
        let mut total = 0;
        for (i, &c_out) in self.widths.iter().enumerate() {
            total += k2 * c_in * c_out + c_out;
            if i + 1 < self.widths.len() {
                total += 2 * c_out;
            }
            c_in = c_out;
        }
        total
    }
}

/// Maps an image concatenated with a prediction to a per-pixel flaw score.
pub struct FlawDetector {
    arch: FlawDetectorArch,
    in_channels: usize,
    seed: u64,
    store: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm>,
}

impl FlawDetector {
    /// `image_channels + prediction_channels` inputs.
    pub fn new(arch: FlawDetectorArch, image_channels: usize, prediction_channels: usize, seed: u64) -> Result<Self> {
        Self::with_dtype(arch, image_channels, prediction_channels, seed, DType::F32)
    }

    pub fn with_dtype(
        arch: FlawDetectorArch,
        image_channels: usize,
        prediction_channels: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        arch.validate()?;
        let in_channels = image_channels + prediction_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = in_channels;
        let n = arch.widths.len();
        for (i, (&c_out, &stride)) in arch.widths.iter().zip(&arch.strides).enumerate() {
            let init = if i + 1 < n { Init::He } else { Init::FanIn };
            convs.push(Conv2d::new(&mut store, &format!("conv{i}"), c_in, c_out, arch.kernel, stride, init, &mut rng)?);
            if i + 1 < n {
                norms.push(BatchNorm::new(&mut store, &format!("norm{i}"), c_out)?);
            }
            c_in = c_out;
        }
        Ok(Self {
            arch,
            in_channels,
            seed,
            store,
            convs,
            norms,
        })
    }

    pub fn arch(&self) -> &FlawDetectorArch {
        &self.arch
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Unsquashed scores `[B, H, W]` for `image [B, H, W, C]` and `prediction [B, H, W, O]`.
    pub fn forward(&self, image: &Tensor, prediction: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let (b, h, w, _) = image.dims4()?;
        let (pb, ph, pw, _) = prediction.dims4()?;
        if (b, h, w) != (pb, ph, pw) {
            return Err(GctError::input(format!(
                "image is {b}x{h}x{w} but prediction is {pb}x{ph}x{pw}"
            )));
        }
        let prediction = prediction.to_dtype(image.dtype())?;
        let mut x = Tensor::cat(&[image, &prediction], 3)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x, mode)?;
            if let Some(norm) = self.norms.get(i) {
                x = ops::leaky_relu(&norm.forward(&x, mode)?, self.arch.leaky_slope)?;
            }
        }
        ops::resize_bilinear(&x.squeeze(3)?, h, w)
    }

    /// Scores squashed to `(0, 1)`, the form trained against flaw targets.
    pub fn probability(&self, image: &Tensor, prediction: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        ops::sigmoid(&self.forward(image, prediction, mode)?)
    }
}

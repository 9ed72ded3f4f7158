//! Minimal layer library on top of candle autograd, NHWC throughout.

pub mod ops;
mod optim;

use std::hash::{DefaultHasher, Hasher};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GctError, Result};

pub use optim::{Adam, AdamConfig};

/// How a network is run for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Gradients reach the parameters; normalization uses and updates batch statistics.
    Train,
    /// Parameters are constants; normalization uses batch statistics without updating them.
    /// Gradients still flow through to the inputs.
    Frozen,
    /// Parameters are constants; normalization uses running statistics.
    Eval,
}

impl ForwardMode {
    fn param(self, var: &Var) -> Tensor {
        match self {
            ForwardMode::Train => var.as_tensor().clone(),
            ForwardMode::Frozen | ForwardMode::Eval => var.as_tensor().detach(),
        }
    }
}

/// Named learnable parameters plus non-learnable buffers of one network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn add_param(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push((name, var.clone()));
        Ok(var)
    }

    fn add_buffer(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.push((name, var.clone()));
        Ok(var)
    }

    pub fn params(&self) -> impl Iterator<Item = &Var> {
        self.params.iter().map(|(_, v)| v)
    }

    /// Parameters followed by buffers, in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, v)| (n.as_str(), v))
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Hash over the bit patterns of every parameter and buffer.
    pub fn checksum(&self) -> Result<u64> {
        let mut h = DefaultHasher::new();
        for (name, var) in self.named_tensors() {
            h.write(name.as_bytes());
            for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.write_u64(v.to_bits());
            }
        }
        Ok(h.finish())
    }

    /// Overwrites every tensor with the same-named tensor from `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let mut lhs = self.named_tensors();
        for (name, src) in other.named_tensors() {
            let (dst_name, dst) = lhs
                .next()
                .ok_or_else(|| GctError::input("parameter stores differ in length"))?;
            if dst_name != name || dst.shape() != src.shape() {
                return Err(GctError::input(format!(
                    "parameter mismatch: {dst_name} {:?} vs {name} {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.set(&src.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Loads tensors by name; every stored name must be present.
    pub fn load_map(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_tensors() {
            let t = tensors
                .get(name)
                .ok_or_else(|| GctError::input(format!("missing tensor `{name}`")))?;
            if t.shape() != var.shape() {
                return Err(GctError::input(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Weight initialisation family.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`; suited to ReLU stacks.
    He,
    /// Uniform with bound `1 / sqrt(fan_in)`.
    FanIn,
}

/// 2-D convolution on NHWC input with "same" padding. Weights are stored as a
/// `[KH * KW * C_in, C_out]` matrix so the forward pass is one GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    kernel: usize,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (kernel * kernel * in_channels) as f64;
        let bound = match init {
            Init::He => (6.0 / fan_in).sqrt(),
            Init::FanIn => 1.0 / fan_in.sqrt(),
        };
        let k = kernel * kernel * in_channels;
        let w: Vec<f64> = (0..k * out_channels).map(|_| rng.random_range(-bound..bound)).collect();
        let bias_bound = 1.0 / fan_in.sqrt();
        let b: Vec<f64> = (0..out_channels).map(|_| rng.random_range(-bias_bound..bias_bound)).collect();
        let weight = store.add_param(format!("{name}.weight"), w, &[k, out_channels])?;
        let bias = store.add_param(format!("{name}.bias"), b, &[out_channels])?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            in_channels,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let (_, _, _, c) = x.dims4()?;
        if c != self.in_channels {
            return Err(GctError::input(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let weight = mode.param(&self.weight);
        let bias = mode.param(&self.bias);
        ops::conv2d(x, &weight, &bias, self.kernel, self.stride)
    }
}

/// Batch normalisation over the channel (last) axis of an NHWC tensor.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.gamma"), vec![1.0; channels], &[channels])?,
            beta: store.add_param(format!("{name}.beta"), vec![0.0; channels], &[channels])?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), vec![0.0; channels], &[channels])?,
            running_var: store.add_buffer(format!("{name}.running_var"), vec![1.0; channels], &[channels])?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let shape = x.shape().clone();
        let c = *shape.dims().last().expect("rank >= 1");
        let flat = x.reshape(((), c))?;
        let (gamma, beta) = (mode.param(&self.gamma), mode.param(&self.beta));
        if mode == ForwardMode::Eval {
            let mean = self.running_mean.as_tensor().detach();
            let inv = (self.running_var.as_tensor().detach() + self.eps)?.sqrt()?.recip()?;
            let scale = (gamma * &inv)?;
            let shift = (beta - (&mean * &scale)?)?;
            let y = flat.broadcast_mul(&scale)?.broadcast_add(&shift)?;
            return Ok(y.reshape(shape)?);
        }
        if mode == ForwardMode::Train {
            let d = flat.detach();
            let n = d.dim(0)? as f64;
            let mean = d.mean(0)?;
            let var = d.broadcast_sub(&mean)?.sqr()?.mean(0)?;
            let unbiased = if n > 1.0 { (var * (n / (n - 1.0)))? } else { var };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
        }
        let y = ops::batch_norm_batch_stats(&flat, &gamma, &beta, self.eps)?;
        Ok(y.reshape(shape)?)
    }
}
